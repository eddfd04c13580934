"""Experiment machinery: macro metrics over pooled subject predictions,
subject-level leave-one-out cross-validation, class-balanced few-shot
subsampling, multi-run reports, and forecast export for plotting.

A "pipeline" is any callable ``(train_entries, seed) -> predict`` where
``predict(entries) -> (n_clips, C) logits`` scores one subject's clips.
Training code plugs in the real model; tests plug in cheap stand-ins.
Run-to-run variation comes only from resampling: the training seed is held
fixed across runs, so a fraction of 1.0 yields identical runs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import model as gm
from .data import (DatasetManifest, LabeledClip, ManifestEntry, PoseSequence,
                   split_input_target, write_clip)
from .train import Checkpoint, TrainConfig, finetune, train_scratch

Pipeline = Callable[[list[ManifestEntry], int], Callable[[list[ManifestEntry]], np.ndarray]]


class EvalError(ValueError):
    pass


@dataclass
class Fold:
    test_subject: str
    train_subjects: list[str]


@dataclass
class FoldPlan:
    folds: list[Fold]

    def __len__(self) -> int:
        return len(self.folds)


def macro_metrics(preds, labels, class_count: int) -> tuple[float, float, float]:
    """Macro F1, precision, recall over all `class_count` classes.

    Per-class 0/0 ratios are defined as 0; the macro average runs over every
    class, present in the data or not.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise EvalError(f"macro_metrics: bad prediction/label shapes "
                        f"{preds.shape} vs {labels.shape}")
    if preds.min() < 0 or labels.min() < 0 or preds.max() >= class_count \
            or labels.max() >= class_count:
        raise EvalError(f"macro_metrics: value outside 0..{class_count - 1}")
    f1s, ps, rs = [], [], []
    for c in range(class_count):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
        ps.append(p)
        rs.append(r)
    return float(np.mean(f1s)), float(np.mean(ps)), float(np.mean(rs))


def aggregate_subject(clip_logits) -> int:
    """Subject prediction: argmax of the mean logit vector over the subject's
    clips; ties go to the lower class index."""
    arr = np.asarray(clip_logits, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise EvalError(f"aggregate_subject: need (clips, classes), got {arr.shape}")
    return int(np.argmax(arr.mean(axis=0)))


def plan_loocv(manifest: DatasetManifest | Sequence[ManifestEntry]) -> FoldPlan:
    """One fold per subject, ordered by subject id."""
    entries = manifest.entries if isinstance(manifest, DatasetManifest) else list(manifest)
    subjects = sorted({e.subject_id for e in entries})
    if len(subjects) < 2:
        raise EvalError(f"plan_loocv: need >= 2 subjects, got {len(subjects)}")
    return FoldPlan([Fold(s, [o for o in subjects if o != s]) for s in subjects])


def few_shot_sample(entries: Sequence[ManifestEntry], fraction: float, seed: int,
                    class_count: int = 4) -> list[ManifestEntry]:
    """Class-balanced subsample of round(fraction * len(entries)) entries.

    Quotas split the target as evenly as possible across classes (seeded
    choice of which classes take the remainder); classes with too little
    supply contribute everything and their shortfall is redistributed to the
    remaining classes in proportion to leftover supply. Deterministic per
    seed; fraction 1.0 is the identity.
    """
    entries = list(entries)
    if not entries:
        raise EvalError("few_shot_sample: empty manifest")
    if not (0.0 < fraction <= 1.0):
        raise EvalError(f"few_shot_sample: fraction {fraction} outside (0, 1]")
    if fraction == 1.0:
        return entries
    target = int(math.floor(fraction * len(entries) + 0.5))  # round half up
    target = max(target, 1)
    rng = np.random.default_rng(seed)

    by_class: dict[int, list[ManifestEntry]] = {c: [] for c in range(class_count)}
    for e in sorted(entries, key=lambda e: (e.subject_id, e.path)):
        if e.label >= class_count:
            raise EvalError(f"few_shot_sample: label {e.label} >= classes {class_count}")
        by_class[e.label].append(e)
    supply = {c: len(v) for c, v in by_class.items()}

    base, rem = divmod(target, class_count)
    quotas = {c: base for c in range(class_count)}
    for c in rng.permutation(class_count)[:rem]:
        quotas[int(c)] += 1
    take = {c: min(quotas[c], supply[c]) for c in range(class_count)}

    # push any shortfall onto classes that still have supply, proportionally
    while (short := target - sum(take.values())) > 0:
        leftover = {c: supply[c] - take[c] for c in range(class_count) if supply[c] > take[c]}
        if not leftover:
            break
        total_left = sum(leftover.values())
        ideal = {c: short * leftover[c] / total_left for c in leftover}
        add = {c: min(int(math.floor(v)), leftover[c]) for c, v in ideal.items()}
        spare = short - sum(add.values())
        for c in sorted(leftover, key=lambda c: (-(ideal[c] - math.floor(ideal[c])), c)):
            if spare == 0:
                break
            if add[c] < leftover[c]:
                add[c] += 1
                spare -= 1
        if all(v == 0 for v in add.values()):
            biggest = max(leftover, key=lambda c: (leftover[c], -c))
            add[biggest] = 1
        for c, v in add.items():
            take[c] += v

    chosen: list[ManifestEntry] = []
    for c in range(class_count):
        if take[c] == 0:
            continue
        idx = rng.choice(supply[c], size=take[c], replace=False)
        chosen.extend(by_class[c][i] for i in sorted(idx))
    return chosen


def run_loocv(entries: Sequence[ManifestEntry], pipeline: Pipeline, *, train_seed: int = 0,
              fraction: float = 1.0, sampler_seed: int = 0, class_count: int = 4
              ) -> list[tuple[str, int, int]]:
    """Full leave-one-subject-out sweep; returns (subject, pred, label) rows.

    Test clips never reach the pipeline's training side, the sampler, or
    anything derived from them.
    """
    entries = list(entries)
    plan = plan_loocv(entries)
    by_subject: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        by_subject.setdefault(e.subject_id, []).append(e)
    results = []
    for fold in plan.folds:
        train_entries = [e for s in fold.train_subjects for e in by_subject[s]]
        if fraction < 1.0:
            train_entries = few_shot_sample(train_entries, fraction, sampler_seed,
                                            class_count=class_count)
        predict = pipeline(train_entries, train_seed)
        test_entries = by_subject[fold.test_subject]
        logits = np.asarray(predict(test_entries), dtype=np.float64)
        if logits.shape != (len(test_entries), class_count):
            raise EvalError(f"pipeline returned {logits.shape}, wanted "
                            f"({len(test_entries)}, {class_count})")
        pred = aggregate_subject(logits)
        labels = {e.label for e in test_entries}
        if len(labels) != 1:
            raise EvalError(f"subject {fold.test_subject} has conflicting labels {labels}")
        results.append((fold.test_subject, pred, labels.pop()))
    return results


@dataclass
class RunResult:
    fraction: float
    run: int
    f1: float
    precision: float
    recall: float
    subject_rows: list[tuple[str, int, int]] = field(default_factory=list)


@dataclass
class ExperimentReport:
    class_count: int
    runs: list[RunResult]
    config_echo: str = ""

    def per_fraction(self) -> dict[float, dict[str, tuple[float, float]]]:
        """fraction -> metric -> (mean, population std) across runs."""
        out: dict[float, dict[str, tuple[float, float]]] = {}
        for frac in sorted({r.fraction for r in self.runs}):
            rows = [r for r in self.runs if r.fraction == frac]
            out[frac] = {
                m: (float(np.mean([getattr(r, m) for r in rows])),
                    float(np.std([getattr(r, m) for r in rows])))
                for m in ("f1", "precision", "recall")
            }
        return out

    def plot_table(self) -> str:
        lines = ["fraction,run,f1,precision,recall"]
        for r in sorted(self.runs, key=lambda r: (r.fraction, r.run)):
            lines.append(f"{r.fraction:g},{r.run},{r.f1:.6f},{r.precision:.6f},{r.recall:.6f}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ExperimentSpec:
    pipeline: Pipeline
    entries: Sequence[ManifestEntry]
    class_count: int = 4
    fractions: tuple[float, ...] = (0.25, 0.5, 0.75)
    runs: int = 3
    base_seed: int = 0
    config_echo: str = ""


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    """LOOCV sweeps for every (fraction, run) pair.

    Per-run seeds drive only the few-shot sampler; the training seed stays
    at base_seed so fraction 1.0 reproduces the same result each run.
    """
    if spec.runs < 1 or not spec.fractions:
        raise EvalError("run_experiment: need runs >= 1 and at least one fraction")
    results = []
    for fraction in spec.fractions:
        for run in range(spec.runs):
            sampler_seed = int(np.random.default_rng([spec.base_seed, run]).integers(2**31))
            rows = run_loocv(spec.entries, spec.pipeline, train_seed=spec.base_seed,
                             fraction=fraction, sampler_seed=sampler_seed,
                             class_count=spec.class_count)
            f1, p, r = macro_metrics([x[1] for x in rows], [x[2] for x in rows],
                                     spec.class_count)
            results.append(RunResult(fraction=fraction, run=run, f1=f1, precision=p,
                                     recall=r, subject_rows=rows))
    return ExperimentReport(class_count=spec.class_count, runs=results,
                            config_echo=spec.config_echo)


def report_text(report: ExperimentReport) -> str:
    """Deterministic structured-text report: config echo, per-fold rows,
    pooled metrics per fraction/run, and the mean/std table."""
    lines = ["# experiment report v1", "[config]"]
    lines += report.config_echo.splitlines() if report.config_echo else ["(none)"]
    lines.append("[runs]")
    for r in sorted(report.runs, key=lambda r: (r.fraction, r.run)):
        lines.append(f"fraction={r.fraction:g} run={r.run} "
                     f"f1={r.f1:.6f} precision={r.precision:.6f} recall={r.recall:.6f}")
        for subject, pred, label in r.subject_rows:
            lines.append(f"  subject={subject} pred={pred} label={label}")
    lines.append("[summary]")
    for frac, metrics in report.per_fraction().items():
        parts = " ".join(f"{m}={v[0]:.6f}±{v[1]:.6f}" for m, v in metrics.items())
        lines.append(f"fraction={frac:g} {parts}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# the real model pipeline + forecast export

def training_pipeline(model_config: gm.ModelConfig, tcfg: TrainConfig, strategy: str,
                      clip_lookup: Mapping[str, LabeledClip],
                      init: Checkpoint | None = None) -> Pipeline:
    """Wrap a training strategy as a LOOCV pipeline.

    strategy "scratch" trains fresh; the fine-tune strategies start from
    `init`. Class weights are recomputed inside the training call from the
    fold's training clips only.
    """
    if strategy != "scratch" and init is None:
        raise EvalError(f"strategy {strategy!r} needs an initial checkpoint")

    def build(train_entries: list[ManifestEntry], seed: int):
        clips = [clip_lookup[e.path] for e in train_entries]
        tc = TrainConfig(**{**tcfg.to_dict(),
                            "stage_epochs": tuple(tcfg.stage_epochs),
                            "seed": seed,
                            "strategy": "scratch" if strategy == "scratch" else strategy})
        if strategy == "scratch":
            ck = train_scratch(clips, model_config, tc)
        else:
            ck = finetune(init, clips, strategy, tc, class_count=model_config.classes)

        def predict(test_entries: list[ManifestEntry]) -> np.ndarray:
            rows = []
            for e in test_entries:
                clip = clip_lookup[e.path]
                x = clip.poses.data[:model_config.input_frames]
                rows.append(gm.forward(x, ck.params, need_forecast=False).logits.data)
            return np.stack(rows)

        return predict

    return build


def export_forecasts(params: gm.ModelParams, clips: Sequence[LabeledClip], out_dir) -> list[Path]:
    """Write input/truth/prediction pose files per clip for external plotting.

    Each clip yields three portable clip files tagged by role in the name:
    the t observed frames, the M ground-truth future frames, and the final
    decoder layer's M predicted frames.
    """
    cfg = params.config
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, clip in enumerate(clips):
        if clip.poses.pose_dim != cfg.pose_dim:
            raise EvalError(f"clip pose dim {clip.poses.pose_dim} != model {cfg.pose_dim}")
        if clip.poses.frames < cfg.input_frames + cfg.forecast_frames:
            raise EvalError(f"clip has {clip.poses.frames} frames, model needs "
                            f"{cfg.input_frames + cfg.forecast_frames}")
        observed, future = split_input_target(clip.poses, cfg.input_frames)
        pred = gm.forward(observed.data, params).layer_forecasts[-1].data
        mk = lambda a: PoseSequence(a, joints=clip.poses.joints,
                                    frame_rate=clip.poses.frame_rate)
        stem = clip.source_id or f"clip{i:04d}"
        roles = {
            "input": observed,
            "truth": mk(future.data[:cfg.forecast_frames].copy()),
            "pred": mk(pred),
        }
        for role, seq in roles.items():
            path = out / f"{stem}_{role}.clip"
            write_clip(path, LabeledClip(seq, label=clip.label,
                                         subject_id=clip.subject_id,
                                         source_id=f"{stem}_{role}"))
            written.append(path)
    return written
