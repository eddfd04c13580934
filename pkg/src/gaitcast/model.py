"""Pose sequence transformer: a pose embedder, a self-attention encoder whose
mean-pooled latents feed one linear classification layer, and a
non-autoregressive decoder that emits a forecast after every layer.

The decoder receives M copies of the embedded last observed pose as queries
and predicts all M future frames in one pass. Each decoder layer's output is
mapped back to pose space by a shared linear head, plus a residual copy of
the last observed pose, so an untrained forecaster predicts a frozen pose.

Classification reads encoder latents only; no decoder parameter can influence
the logits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"POSECKPT"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    pose_dim: int              # N = 3 * joints
    embed_dim: int = 128       # D
    layers: int = 4            # encoder and decoder depth
    heads: int = 4
    ff_dim: int = 256
    classes: int = 4
    input_frames: int = 60     # t
    forecast_frames: int = 40  # M
    dropout: float = 0.1

    def __post_init__(self):
        if self.pose_dim < 1 or self.layers < 1 or self.ff_dim < 1:
            raise ModelError(f"bad dimensions in {self}")
        if self.embed_dim % self.heads != 0:
            raise ModelError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.input_frames < 1 or self.forecast_frames < 1:
            raise ModelError("input_frames and forecast_frames must be >= 1")
        if self.classes < 2:
            raise ModelError("need at least 2 classes")
        if not (0.0 <= self.dropout < 1.0):
            raise ModelError(f"dropout {self.dropout} outside [0, 1)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "pose_dim", "embed_dim", "layers", "heads", "ff_dim", "classes",
            "input_frames", "forecast_frames", "dropout")}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter tensor's name and shape, in a fixed order."""
    n, d, ff, c = cfg.pose_dim, cfg.embed_dim, cfg.ff_dim, cfg.classes
    shapes: dict[str, tuple[int, ...]] = {
        "phi.w": (n, d), "phi.b": (d,),
        "pos.enc": (cfg.input_frames, d),
        "pos.dec": (cfg.forecast_frames, d),
    }

    def attn(prefix):
        for name in _attn_names(prefix):
            shapes[name] = (d, d) if name.split(".")[-1].startswith("w") else (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffw(prefix):
        shapes[f"{prefix}.w1"] = (d, ff)
        shapes[f"{prefix}.b1"] = (ff,)
        shapes[f"{prefix}.w2"] = (ff, d)
        shapes[f"{prefix}.b2"] = (d,)

    for i in range(cfg.layers):
        ln(f"enc.{i}.ln1"); attn(f"enc.{i}.attn"); ln(f"enc.{i}.ln2"); ffw(f"enc.{i}.ff")
    for i in range(cfg.layers):
        ln(f"dec.{i}.ln1"); attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln2"); attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln3"); ffw(f"dec.{i}.ff")
    shapes["psi.w"] = (d, n)
    shapes["psi.b"] = (n,)
    shapes["cls.w"] = (d, c)
    shapes["cls.b"] = (c,)
    return shapes


class ModelParams:
    """Named parameter tensors plus the branch bookkeeping the training
    strategies rely on."""

    def __init__(self, tensors: dict[str, Tensor], config: ModelConfig):
        want = expected_shapes(config)
        if set(tensors) != set(want):
            missing = sorted(set(want) - set(tensors))
            extra = sorted(set(tensors) - set(want))
            raise ModelError(f"parameter names mismatch: missing {missing}, extra {extra}")
        for name, shape in want.items():
            if tensors[name].shape != shape:
                raise ModelError(
                    f"parameter {name}: shape {tensors[name].shape}, wanted {shape}")
        self.tensors = {name: tensors[name] for name in want}  # fixed order
        self.config = config

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def forecast_branch(self) -> list[str]:
        """Decoder stack, pose head, and decoder positions: the parameters a
        class-only fine-tune must never touch."""
        return [n for n in self.tensors
                if n.startswith("dec.") or n.startswith("psi.") or n == "pos.dec"]

    def classifier_head(self) -> list[str]:
        return [n for n in self.tensors if n.startswith("cls.")]

    def trunk(self) -> list[str]:
        rest = set(self.forecast_branch()) | set(self.classifier_head())
        return [n for n in self.tensors if n not in rest]

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({n: Tensor(t.data.copy(), requires_grad=True, name=n)
                            for n, t in self.tensors.items()}, self.config)

    def grads(self) -> dict[str, np.ndarray | None]:
        return {n: t.grad for n, t in self.tensors.items()}

    def zero_grads(self) -> None:
        ad.zero_grads(list(self.tensors.values()))


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Scaled-uniform init: weights U(+-1/sqrt(fan_in)), position tables
    U(+-1/sqrt(D)), norm gains 1, every bias 0. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        leaf = name.split(".")[-1]
        if leaf == "g":
            data = np.ones(shape)
        elif leaf.startswith("b") or leaf == "b1" or leaf == "b2":
            data = np.zeros(shape)
        elif len(shape) == 2 and not name.startswith("pos."):
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:  # positional tables
            bound = 1.0 / np.sqrt(config.embed_dim)
            data = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(tensors, config)


@dataclass
class ForecastOutput:
    latents: Tensor                  # (B, t, D)
    logits: Tensor                   # (B, C)
    layer_forecasts: list[Tensor]    # L tensors of (B, M, N); empty if skipped
    attention: list[Tensor] = field(default_factory=list)

    def squeeze(self) -> "ForecastOutput":
        """Drop the batch axis of a single-clip forward (stays on the graph)."""
        sq = lambda t: ad.reshape(t, t.shape[1:])
        return ForecastOutput(latents=sq(self.latents), logits=sq(self.logits),
                              layer_forecasts=[sq(p) for p in self.layer_forecasts],
                              attention=self.attention)


def _batched(x, pose_dim: int, what: str) -> tuple[Tensor, bool]:
    t = x if isinstance(x, Tensor) else ad.constant(np.asarray(x, dtype=np.float64))
    was_2d = t.ndim == 2
    if was_2d:
        t = ad.reshape(t, (1,) + t.shape)
    if t.ndim != 3 or t.shape[-1] != pose_dim:
        raise ad.ShapeError(f"{what}: expected (frames, {pose_dim}) or batched, got {t.shape}")
    return t, was_2d


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate <= 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return ad.mul(x, ad.constant(mask))


def _linear(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return ad.add_bias(ad.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // heads
    x = ad.reshape(x, (b, t, heads, dh))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b * heads, t, dh))


def _merge_heads(x: Tensor, heads: int) -> Tensor:
    bh, t, dh = x.shape
    b = bh // heads
    x = ad.reshape(x, (b, heads, t, dh))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (b, t, heads * dh))


def _attention(q_in: Tensor, kv_in: Tensor, p: ModelParams, prefix: str, heads: int,
               attn_sink: list[Tensor] | None) -> Tensor:
    proj = lambda t, w, b: ad.add_bias(ad.matmul(t, p[f"{prefix}.{w}"]), p[f"{prefix}.{b}"])
    q = _split_heads(proj(q_in, "wq", "bq"), heads)
    k = _split_heads(proj(kv_in, "wk", "bk"), heads)
    v = _split_heads(proj(kv_in, "wv", "bv"), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(q.shape[-1]))
    probs = ad.softmax_lastdim(scores)
    if attn_sink is not None:
        attn_sink.append(probs)
    ctx = _merge_heads(ad.matmul(probs, v), heads)
    return proj(ctx, "wo", "bo")


def _ln(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return ad.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"])


def _ff(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    h = ad.relu(ad.add_bias(ad.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return ad.add_bias(ad.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def embed(x, params: ModelParams, *, positions: str = "pos.enc") -> Tensor:
    """Per-frame pose embedding plus the positional table row for each index."""
    cfg = params.config
    xt, was_2d = _batched(x, cfg.pose_dim, "embed")
    table = params[positions]
    if xt.shape[1] > table.shape[0]:
        raise ad.ShapeError(
            f"embed: {xt.shape[1]} frames exceed positional table {table.shape[0]}")
    pos = table if xt.shape[1] == table.shape[0] else ad.slice_axis(table, 0, 0, xt.shape[1])
    out = ad.add_shared(_linear(xt, params, "phi"), pos)
    return ad.reshape(out, out.shape[1:]) if was_2d else out


def encode(embeddings: Tensor, params: ModelParams, *, train: bool = False,
           rng: np.random.Generator | None = None,
           attn_sink: list[Tensor] | None = None) -> Tensor:
    """Pre-norm self-attention encoder stack (attention, residual, feed
    forward, residual), no causal mask."""
    cfg = params.config
    x = embeddings
    was_2d = x.ndim == 2
    if was_2d:
        x = ad.reshape(x, (1,) + x.shape)
    drop = rng if train else None
    for i in range(cfg.layers):
        h = _ln(x, params, f"enc.{i}.ln1")
        a = _attention(h, h, params, f"enc.{i}.attn", cfg.heads, attn_sink)
        x = ad.add(x, _dropout(a, cfg.dropout, drop))
        f = _ff(_ln(x, params, f"enc.{i}.ln2"), params, f"enc.{i}.ff")
        x = ad.add(x, _dropout(f, cfg.dropout, drop))
    return ad.reshape(x, x.shape[1:]) if was_2d else x


def classify(latents: Tensor, params: ModelParams) -> Tensor:
    """Mean-pool encoder latents over time, then one linear layer."""
    z = latents
    was_2d = z.ndim == 2
    if was_2d:
        z = ad.reshape(z, (1,) + z.shape)
    pooled = ad.mean(z, axis=1)
    logits = _linear(pooled, params, "cls")
    return ad.reshape(logits, (params.config.classes,)) if was_2d else logits


def decode_forecast(latents: Tensor, params: ModelParams, x_last, m: int | None = None, *,
                    train: bool = False, rng: np.random.Generator | None = None,
                    attn_sink: list[Tensor] | None = None) -> list[Tensor]:
    """One non-autoregressive decoder pass; returns every layer's forecast.

    Queries are M copies of the embedded last observed pose placed at decoder
    positions. After each layer the shared pose head maps latents to a pose
    delta, and the last observed pose is added back.
    """
    cfg = params.config
    m = cfg.forecast_frames if m is None else m
    z = latents
    was_2d = z.ndim == 2
    if was_2d:
        z = ad.reshape(z, (1,) + z.shape)
    xl = x_last if isinstance(x_last, Tensor) else ad.constant(np.asarray(x_last, dtype=np.float64))
    if xl.ndim == 1:
        xl = ad.reshape(xl, (1, 1, xl.shape[0]))
    if xl.shape != (z.shape[0], 1, cfg.pose_dim):
        raise ad.ShapeError(f"decode_forecast: last pose {xl.shape}, "
                            f"wanted ({z.shape[0]}, 1, {cfg.pose_dim})")
    table = params["pos.dec"]
    if m > table.shape[0]:
        raise ad.ShapeError(f"decode_forecast: {m} frames exceed positional table {table.shape[0]}")
    pos = table if m == table.shape[0] else ad.slice_axis(table, 0, 0, m)

    e_last = _linear(xl, params, "phi")                       # (B, 1, D)
    queries = ad.add_shared(ad.concat([e_last] * m, axis=1), pos)
    x_hold = ad.concat([xl] * m, axis=1)                      # (B, M, N)

    drop = rng if train else None
    x = queries
    outputs = []
    for i in range(cfg.layers):
        h = _ln(x, params, f"dec.{i}.ln1")
        a = _attention(h, h, params, f"dec.{i}.self", cfg.heads, attn_sink)
        x = ad.add(x, _dropout(a, cfg.dropout, drop))
        c = _attention(_ln(x, params, f"dec.{i}.ln2"), z,
                       params, f"dec.{i}.cross", cfg.heads, attn_sink)
        x = ad.add(x, _dropout(c, cfg.dropout, drop))
        f = _ff(_ln(x, params, f"dec.{i}.ln3"), params, f"dec.{i}.ff")
        x = ad.add(x, _dropout(f, cfg.dropout, drop))
        outputs.append(ad.add(_linear(x, params, "psi"), x_hold))
    if was_2d:
        outputs = [ad.reshape(o, o.shape[1:]) for o in outputs]
    return outputs


def forward(x, params: ModelParams, *, train: bool = False,
            rng: np.random.Generator | None = None, need_forecast: bool = True,
            collect_attention: bool = False) -> ForecastOutput:
    """embed -> encode -> {classify, decode}; deterministic when train=False."""
    cfg = params.config
    xt, was_2d = _batched(x, cfg.pose_dim, "forward")
    if xt.shape[1] != cfg.input_frames:
        raise ad.ShapeError(
            f"forward: got {xt.shape[1]} input frames, config says {cfg.input_frames}")
    sink: list[Tensor] | None = [] if collect_attention else None
    emb = embed(xt, params)
    if train and rng is not None and cfg.dropout > 0.0:
        emb = _dropout(emb, cfg.dropout, rng)
    z = encode(emb, params, train=train, rng=rng, attn_sink=sink)
    logits = classify(z, params)
    forecasts: list[Tensor] = []
    if need_forecast:
        x_last = ad.slice_axis(xt, 1, cfg.input_frames - 1, 1)
        forecasts = decode_forecast(z, params, x_last, train=train, rng=rng, attn_sink=sink)
    out = ForecastOutput(latents=z, logits=logits, layer_forecasts=forecasts,
                         attention=sink or [])
    return out.squeeze() if was_2d else out


# ---------------------------------------------------------------------------
# checkpoint container: magic, version, json header, raw little-endian f64

def save_params(path, params: ModelParams, extra: dict | None = None) -> None:
    """Self-describing binary checkpoint; `extra` must be JSON-serializable."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": params.config.to_dict(),
        "tensors": [[n, list(t.shape)] for n, t in params.tensors.items()],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for t in params.tensors.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path) -> tuple[ModelParams, dict]:
    """Read a checkpoint, validating shapes against its own config."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(header["model_config"])
    want = expected_shapes(config)
    offset = 20 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        shape = tuple(shape)
        if want.get(name) != shape:
            raise ModelError(f"{path}: tensor {name} shape {shape} "
                             f"does not match config {want.get(name)}")
        count = int(np.prod(shape))
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        tensors[name] = Tensor(data.copy(), requires_grad=True, name=name)
    return ModelParams(tensors, config), header["extra"]
