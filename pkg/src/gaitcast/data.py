"""Skeleton motion data: ingestion, normalization, windowing, synthesis, labels.

All sequences are (frames, 3*joints) float64 arrays, one flattened 3D pose per
row. File formats owned here:

* NTU-style skeleton text (read only): frame-count line; per frame a body
  count; per body one info line (skipped), a joint-count line, then one line
  per joint whose first three fields are x y z.
* Portable clip (read/write): header ``joints=J frames=F label=L subject=S``
  followed by F lines of 3*J decimals printed at 17 significant digits.
* Manifest (read/write): one record per line, tab separated:
  path, subject_id, label, split.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DataFormatError(ValueError):
    """Malformed skeleton/clip/manifest input."""


@dataclass
class PoseSequence:
    """Time-ordered flattened skeleton vectors: data is (frames, 3*joints)."""

    data: np.ndarray
    joints: int
    frame_rate: float = 30.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise DataFormatError(f"pose data must be 2-D, got shape {self.data.shape}")
        if self.data.shape[1] != 3 * self.joints:
            raise DataFormatError(
                f"pose dim {self.data.shape[1]} != 3*joints ({3 * self.joints})")
        if not np.all(np.isfinite(self.data)):
            raise DataFormatError("pose data contains non-finite values")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def pose_dim(self) -> int:
        return self.data.shape[1]

    def as_joints(self) -> np.ndarray:
        """(frames, joints, 3) view of the same data."""
        return self.data.reshape(self.frames, self.joints, 3)


@dataclass
class LabeledClip:
    poses: PoseSequence
    label: int
    subject_id: str
    source_id: str = ""

    def __post_init__(self):
        if self.label < 0:
            raise DataFormatError(f"negative label {self.label}")
        if not self.subject_id or any(c.isspace() for c in self.subject_id):
            raise DataFormatError(f"bad subject id {self.subject_id!r}")


@dataclass
class ManifestEntry:
    path: str
    subject_id: str
    label: int
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    class_count: int
    joints: int

    def __post_init__(self):
        for e in self.entries:
            if not e.subject_id:
                raise DataFormatError(f"empty subject id for {e.path}")
            if not (0 <= e.label < self.class_count):
                raise DataFormatError(
                    f"label {e.label} out of range for {self.class_count} classes ({e.path})")

    def subjects(self) -> list[str]:
        return sorted({e.subject_id for e in self.entries})


# ---------------------------------------------------------------------------
# NTU-style skeleton text

def parse_skeleton_file(source, expected_joints: int | None = None,
                        frame_rate: float = 30.0) -> PoseSequence:
    """Read an NTU-style skeleton text file into one PoseSequence.

    Only the first tracked body per frame is used and only the first three
    fields (x y z) of each joint line. Frames with zero bodies repeat the
    last valid pose; a leading run of empty frames becomes zeros.
    """
    if isinstance(source, bytes):
        text = source.decode("utf-8")
    elif isinstance(source, str) and "\n" not in source and Path(source).exists():
        text = Path(source).read_text()
    else:
        text = str(source)
    lines = text.splitlines()
    pos = 0

    def next_line(what):
        nonlocal pos
        while pos < len(lines) and not lines[pos].strip():
            pos += 1
        if pos >= len(lines):
            raise DataFormatError(f"line {len(lines) + 1}: unexpected end of file, wanted {what}")
        pos += 1
        return lines[pos - 1].split(), pos

    def next_int(what):
        fields, ln = next_line(what)
        try:
            return int(fields[0])
        except (ValueError, IndexError):
            raise DataFormatError(f"line {ln}: expected {what}, got {lines[ln - 1]!r}") from None

    n_frames = next_int("frame count")
    if n_frames < 1:
        raise DataFormatError("line 1: frame count must be >= 1")

    joints = expected_joints
    frames: list[np.ndarray | None] = []
    for f in range(n_frames):
        n_bodies = next_int(f"body count for frame {f + 1}")
        body_pose = None
        for b in range(n_bodies):
            next_line("body info")  # tracking metadata, ignored
            n_joints = next_int("joint count")
            if joints is None:
                joints = n_joints
            if n_joints != joints:
                raise DataFormatError(
                    f"line {pos}: joint count {n_joints} != declared {joints}")
            coords = np.empty((n_joints, 3))
            for j in range(n_joints):
                fields, ln = next_line(f"joint {j + 1} of frame {f + 1}")
                if len(fields) < 3:
                    raise DataFormatError(f"line {ln}: joint line has fewer than 3 fields")
                try:
                    coords[j] = [float(fields[0]), float(fields[1]), float(fields[2])]
                except ValueError:
                    raise DataFormatError(f"line {ln}: non-numeric joint coordinates") from None
            if b == 0:
                body_pose = coords.reshape(-1)
        frames.append(body_pose)

    if joints is None:
        raise DataFormatError("file declares no bodies in any frame")
    n = 3 * joints
    data = np.zeros((n_frames, n))
    last = None
    for i, pose in enumerate(frames):
        if pose is not None:
            last = pose
        if last is not None:
            data[i] = last
    return PoseSequence(data, joints=joints, frame_rate=frame_rate)


# ---------------------------------------------------------------------------
# labels

def majority_label(scores, rng_seed: int = 0, merge_top: bool = True) -> int:
    """Modal rater score, ties broken uniformly at random by seed.

    Raw scores are 0..4; after voting, 4 folds into class 3 so severity
    datasets end up with 4 classes. Tie breaking depends only on the sorted
    multiset of scores, so the result is permutation invariant.
    """
    scores = list(scores)
    if not scores:
        raise DataFormatError("majority_label: empty score list")
    for s in scores:
        if not (0 <= int(s) <= 4):
            raise DataFormatError(f"majority_label: score {s} outside 0..4")
    counts = Counter(int(s) for s in scores)
    top = max(counts.values())
    modes = sorted(c for c, n in counts.items() if n == top)
    if len(modes) == 1:
        label = modes[0]
    else:
        label = int(np.random.default_rng(rng_seed).choice(modes))
    if merge_top and label == 4:
        label = 3
    return label


# ---------------------------------------------------------------------------
# geometry

def normalize(seq: PoseSequence, head_joint: int = 3) -> PoseSequence:
    """Root-center each frame, then scale so mean root-to-head distance is 1.

    Joint 0 is the root. Centering removes camera placement and walking
    translation; the global scale removes subject size. Idempotent to
    floating-point rounding.
    """
    if not (0 < head_joint < seq.joints):
        raise DataFormatError(
            f"normalize: head joint {head_joint} invalid for {seq.joints} joints")
    coords = seq.as_joints().copy()
    coords -= coords[:, :1, :]
    dist = np.linalg.norm(coords[:, head_joint, :], axis=1)
    mean_dist = float(dist.mean())
    if mean_dist <= 0.0:
        raise DataFormatError("normalize: degenerate skeleton, zero extent in every frame")
    coords /= mean_dist
    return PoseSequence(coords.reshape(seq.frames, -1), joints=seq.joints,
                        frame_rate=seq.frame_rate)


def window(seq: PoseSequence, window_len: int = 100, stride: int = 100) -> list[PoseSequence]:
    """Full windows of `window_len` frames every `stride` frames.

    A trailing remainder shorter than the window is dropped. A sequence
    shorter than one window yields an empty list.
    """
    if window_len < 2:
        raise DataFormatError(f"window: window length {window_len} < 2")
    if stride < 1:
        raise DataFormatError(f"window: stride {stride} < 1")
    out = []
    start = 0
    while start + window_len <= seq.frames:
        out.append(PoseSequence(seq.data[start:start + window_len].copy(),
                                joints=seq.joints, frame_rate=seq.frame_rate))
        start += stride
    return out


def split_input_target(clip: PoseSequence, t: int) -> tuple[PoseSequence, PoseSequence]:
    """Split a clip into the first t observed frames and the remaining future."""
    if not (1 <= t < clip.frames):
        raise DataFormatError(f"split point {t} outside 1..{clip.frames - 1}")
    mk = lambda a: PoseSequence(a.copy(), joints=clip.joints, frame_rate=clip.frame_rate)
    return mk(clip.data[:t]), mk(clip.data[t:])


# ---------------------------------------------------------------------------
# synthetic motion

# canonical 25-joint stick figure, (x lateral, y up, z forward)
_TEMPLATE_25 = np.array([
    [0.00, 0.00, 0.00],   # 0 pelvis (root)
    [0.00, 0.25, 0.00],   # 1 spine
    [0.00, 0.50, 0.00],   # 2 neck
    [0.00, 0.65, 0.00],   # 3 head
    [0.18, 0.45, 0.00],   # 4 L shoulder
    [0.30, 0.25, 0.00],   # 5 L elbow
    [0.35, 0.05, 0.00],   # 6 L wrist
    [0.37, 0.00, 0.00],   # 7 L hand
    [-0.18, 0.45, 0.00],  # 8 R shoulder
    [-0.30, 0.25, 0.00],  # 9 R elbow
    [-0.35, 0.05, 0.00],  # 10 R wrist
    [-0.37, 0.00, 0.00],  # 11 R hand
    [0.09, -0.05, 0.00],  # 12 L hip
    [0.10, -0.45, 0.00],  # 13 L knee
    [0.11, -0.85, 0.00],  # 14 L ankle
    [0.12, -0.90, 0.08],  # 15 L foot
    [-0.09, -0.05, 0.00], # 16 R hip
    [-0.10, -0.45, 0.00], # 17 R knee
    [-0.11, -0.85, 0.00], # 18 R ankle
    [-0.12, -0.90, 0.08], # 19 R foot
    [0.00, 0.40, 0.00],   # 20 spine shoulder
    [0.39, -0.02, 0.00],  # 21 L hand tip
    [0.36, 0.02, 0.02],   # 22 L thumb
    [-0.39, -0.02, 0.00], # 23 R hand tip
    [-0.36, 0.02, 0.02],  # 24 R thumb
], dtype=np.float64)

_LEFT_ARM = (5, 6, 7, 21, 22)
_RIGHT_ARM = (9, 10, 11, 23, 24)
_LEFT_LEG = (13, 14, 15)
_RIGHT_LEG = (17, 18, 19)
_UPPER = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24)
# distal joints move more than proximal ones during a swing
_SWING_DEPTH = {5: 0.5, 6: 1.0, 7: 1.1, 21: 1.15, 22: 1.05,
                9: 0.5, 10: 1.0, 11: 1.1, 23: 1.15, 24: 1.05,
                13: 0.6, 14: 1.0, 15: 1.1, 17: 0.6, 18: 1.0, 19: 1.1}


@dataclass(frozen=True)
class SynthSpec:
    classes: int
    clips_per_class: int
    joints: int = 25
    frames: int = 100
    seed: int = 0
    frame_rate: float = 30.0

    def __post_init__(self):
        if self.classes < 2:
            raise DataFormatError("synth: need at least 2 classes")
        if not (4 <= self.joints):
            raise DataFormatError("synth: need at least 4 joints (root..head chain)")
        if self.clips_per_class < 1 or self.frames < 2:
            raise DataFormatError("synth: clips_per_class >= 1 and frames >= 2 required")


def class_signature(c: int, classes: int) -> dict[str, float]:
    """Kinematic profile for class c: higher classes walk slower, swing less,
    stoop more, and tremble more."""
    sev = c / (classes - 1)
    return {
        "freq": 1.1 - 0.65 * sev,       # strides per second
        "arm": 0.50 - 0.42 * sev,       # arm swing amplitude
        "stride": 0.55 - 0.42 * sev,    # leg swing amplitude
        "lean": 0.05 + 0.50 * sev,      # forward stoop shear
        "tremor": 0.004 + 0.030 * sev,  # per-frame jitter std
        "bob": 0.04 * (1.0 - 0.5 * sev),
    }


def _template(joints: int) -> np.ndarray:
    if joints <= 25:
        return _TEMPLATE_25[:joints].copy()
    extra = joints - 25
    k = np.arange(extra)
    tail = np.stack([0.05 * np.cos(k), 0.7 + 0.02 * k, 0.05 * np.sin(k)], axis=1)
    return np.vstack([_TEMPLATE_25, tail])


def _synth_clip(sig: dict[str, float], spec: SynthSpec, rng: np.random.Generator) -> PoseSequence:
    J, F = spec.joints, spec.frames
    base = _template(J)
    # fixed per-subject proportions
    base *= rng.normal(1.0, 0.03, size=(J, 1))
    # stooped posture: shear upper body forward proportionally to height
    upper = [j for j in _UPPER if j < J]
    base[upper, 2] += sig["lean"] * np.maximum(base[upper, 1], 0.0)

    tau = np.arange(F) / spec.frame_rate
    theta = 2.0 * math.pi * sig["freq"] * tau + rng.uniform(0.0, 2.0 * math.pi)
    swing = np.sin(theta)                      # (F,)
    lift = np.maximum(swing, 0.0)

    coords = np.broadcast_to(base, (F, J, 3)).copy()
    for side, sgn in ((_LEFT_LEG, 1.0), (_RIGHT_LEG, -1.0)):
        for j in side:
            if j < J:
                d = _SWING_DEPTH.get(j, 1.0)
                coords[:, j, 2] += sgn * sig["stride"] * d * swing
                coords[:, j, 1] += 0.25 * sig["stride"] * d * (lift if sgn > 0 else np.maximum(-swing, 0.0))
    for side, sgn in ((_LEFT_ARM, -1.0), (_RIGHT_ARM, 1.0)):
        for j in side:
            if j < J:
                coords[:, j, 2] += sgn * sig["arm"] * _SWING_DEPTH.get(j, 1.0) * swing
    # pelvis bob + forward progression, shared by all joints
    coords[:, :, 1] += (sig["bob"] * np.sin(2.0 * theta))[:, None]
    coords[:, :, 2] += (0.8 * sig["stride"] * sig["freq"] * tau)[:, None]
    coords += rng.normal(0.0, sig["tremor"], size=coords.shape)
    coords += rng.normal(0.0, 0.004, size=coords.shape)

    seq = PoseSequence(coords.reshape(F, -1), joints=J, frame_rate=spec.frame_rate)
    return normalize(seq, head_joint=min(3, J - 1))


def synth_dataset(spec: SynthSpec) -> tuple[DatasetManifest, list[LabeledClip]]:
    """Deterministic synthetic motion set; every clip gets its own subject.

    Classes share one parametric walker but differ in speed, stride, arm
    swing, posture, and tremor, so they are separable without being trivial.
    """
    master = np.random.default_rng(spec.seed)
    seeds = master.integers(0, 2**63 - 1, size=spec.classes * spec.clips_per_class)
    clips, entries = [], []
    i = 0
    for c in range(spec.classes):
        sig = class_signature(c, spec.classes)
        for _ in range(spec.clips_per_class):
            rng = np.random.default_rng(seeds[i])
            seq = _synth_clip(sig, spec, rng)
            subject = f"subj{i:03d}"
            clip = LabeledClip(seq, label=c, subject_id=subject, source_id=f"synth{i:04d}")
            clips.append(clip)
            entries.append(ManifestEntry(path=f"clip_{i:04d}.clip", subject_id=subject,
                                         label=c, split="train"))
            i += 1
    manifest = DatasetManifest(entries, class_count=spec.classes, joints=spec.joints)
    return manifest, clips


# ---------------------------------------------------------------------------
# portable clip + manifest files

def write_clip(path, clip: LabeledClip) -> None:
    seq = clip.poses
    rows = [f"joints={seq.joints} frames={seq.frames} label={clip.label} subject={clip.subject_id}"]
    for row in seq.data:
        rows.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(rows) + "\n")


def read_clip(path, frame_rate: float = 30.0) -> LabeledClip:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise DataFormatError(f"{path}: empty clip file")
    header = dict(kv.split("=", 1) for kv in lines[0].split() if "=" in kv)
    try:
        joints = int(header["joints"])
        frames = int(header["frames"])
        label = int(header["label"])
        subject = header["subject"]
    except (KeyError, ValueError):
        raise DataFormatError(f"{path}: bad clip header {lines[0]!r}") from None
    if len(lines) - 1 < frames:
        raise DataFormatError(f"{path}: header says {frames} frames, file has {len(lines) - 1}")
    data = np.empty((frames, 3 * joints))
    for i in range(frames):
        fields = lines[1 + i].split()
        if len(fields) != 3 * joints:
            raise DataFormatError(f"{path}: line {i + 2} has {len(fields)} values, "
                                  f"wanted {3 * joints}")
        data[i] = [float(v) for v in fields]
    seq = PoseSequence(data, joints=joints, frame_rate=frame_rate)
    return LabeledClip(seq, label=label, subject_id=subject, source_id=Path(path).stem)


def write_manifest(path, manifest: DatasetManifest) -> None:
    rows = [f"# class_count={manifest.class_count} joints={manifest.joints}"]
    for e in manifest.entries:
        rows.append(f"{e.path}\t{e.subject_id}\t{e.label}\t{e.split}")
    Path(path).write_text("\n".join(rows) + "\n")


def read_manifest(path, class_count: int | None = None, joints: int | None = None) -> DatasetManifest:
    entries = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            meta = dict(kv.split("=", 1) for kv in line[1:].split() if "=" in kv)
            class_count = class_count or int(meta.get("class_count", 0)) or None
            joints = joints or int(meta.get("joints", 0)) or None
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise DataFormatError(f"{path}: line {ln}: expected 4 tab-separated fields")
        entries.append(ManifestEntry(path=fields[0], subject_id=fields[1],
                                     label=int(fields[2]), split=fields[3]))
    if not entries:
        raise DataFormatError(f"{path}: no manifest entries")
    if class_count is None:
        class_count = max(e.label for e in entries) + 1
    if joints is None:
        first = Path(path).parent / entries[0].path
        joints = read_clip(first).poses.joints
    return DatasetManifest(entries, class_count=class_count, joints=joints)


def write_dataset(out_dir, manifest: DatasetManifest, clips: list[LabeledClip]) -> Path:
    """Write every clip plus the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(manifest.entries) != len(clips):
        raise DataFormatError("manifest entries and clips differ in length")
    for e, clip in zip(manifest.entries, clips):
        write_clip(out / e.path, clip)
    mpath = out / "manifest.tsv"
    write_manifest(mpath, manifest)
    return mpath


def load_clips(manifest_path, manifest: DatasetManifest | None = None) -> dict[str, LabeledClip]:
    """Read every clip referenced by a manifest, keyed by its entry path."""
    mpath = Path(manifest_path)
    if manifest is None:
        manifest = read_manifest(mpath)
    return {e.path: read_clip(mpath.parent / e.path) for e in manifest.entries}
