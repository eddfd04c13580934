"""Optimization loops: joint pre-training, the three fine-tuning strategies,
and from-scratch training, all deterministic per seed.

Strategies map onto which parameters the optimizer updates and which loss is
assembled per batch:

* ``pretrain`` / ``scratch`` / ``both``: every parameter, classification +
  forecasting loss.
* ``class``: classifier head only (optionally also the encoder trunk), pure
  classification loss; the forecasting branch is never evaluated, so its
  tensors stay bitwise identical.
* ``both-then-class``: the two stages above back to back.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses
from .data import LabeledClip
from .model import ModelConfig, ModelParams, forward, init_params, load_params, save_params

STRATEGIES = ("pretrain", "scratch", "class", "both", "both-then-class")


class TrainError(RuntimeError):
    pass


class NonFiniteError(TrainError):
    """A loss or gradient went non-finite; the run is aborted."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    strategy: str = "pretrain"
    stage_epochs: tuple[int, int] = (50, 50)   # for both-then-class
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    unfreeze_encoder: bool = False             # class-only ablation switch
    weighted_ce: bool = True                   # fine-tune/scratch class weighting

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise TrainError(f"bad training config: {self}")
        if self.strategy not in STRATEGIES:
            raise TrainError(f"unknown strategy {self.strategy!r} (one of {STRATEGIES})")
        if self.strategy == "both-then-class" and sum(self.stage_epochs) != self.epochs:
            raise TrainError(
                f"stage_epochs {self.stage_epochs} must sum to epochs {self.epochs}")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "epochs", "learning_rate", "batch_size", "seed", "strategy",
            "weight_decay", "beta1", "beta2", "adam_eps", "unfreeze_encoder",
            "weighted_ce")}
        d["stage_epochs"] = list(self.stage_epochs)
        return d


@dataclass
class EpochRecord:
    epoch: int
    stage: str
    loss_c: float
    loss_f: float     # nan in class-only stages
    loss_total: float
    seconds: float    # excluded from checkpoints

    def to_dict(self) -> dict:
        return {"epoch": self.epoch, "stage": self.stage, "loss_c": self.loss_c,
                "loss_f": self.loss_f, "loss_total": self.loss_total}


@dataclass
class Checkpoint:
    params: ModelParams
    model_config: ModelConfig
    train_config: TrainConfig
    epoch: int
    history: list[EpochRecord] = field(default_factory=list)
    config_echo: str = ""

    def save(self, path) -> None:
        extra = {
            "epoch": self.epoch,
            "train_config": self.train_config.to_dict(),
            "history": [r.to_dict() for r in self.history],
            "config_echo": self.config_echo,
        }
        save_params(path, self.params, extra=extra)


def load_checkpoint(path) -> Checkpoint:
    params, extra = load_params(path)
    tc = extra.get("train_config", {})
    tc["stage_epochs"] = tuple(tc.get("stage_epochs", (50, 50)))
    history = [EpochRecord(seconds=0.0, **r) for r in extra.get("history", [])]
    return Checkpoint(params=params, model_config=params.config,
                      train_config=TrainConfig(**tc) if tc else TrainConfig(),
                      epoch=extra.get("epoch", 0), history=history,
                      config_echo=extra.get("config_echo", ""))


class AdamW:
    """Adaptive-moment update with decoupled weight decay and constant rate."""

    def __init__(self, names, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.names = sorted(names)
        self.lr, self.beta1, self.beta2 = lr, beta1, beta2
        self.eps, self.weight_decay = eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ModelParams, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                raise TrainError(f"missing gradient for parameter {name!r}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient in parameter {name!r}")
            p = params[name]
            if g.shape != p.data.shape:
                raise TrainError(f"gradient shape {g.shape} != param {p.data.shape} ({name})")
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)


def clips_to_arrays(clips: list[LabeledClip], cfg: ModelConfig
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack clips into (X input frames, Y future frames, labels)."""
    if not clips:
        raise TrainError("empty dataset")
    need = cfg.input_frames + cfg.forecast_frames
    X = np.empty((len(clips), cfg.input_frames, cfg.pose_dim))
    Y = np.empty((len(clips), cfg.forecast_frames, cfg.pose_dim))
    labels = np.empty(len(clips), dtype=np.int64)
    for i, clip in enumerate(clips):
        seq = clip.poses
        if seq.pose_dim != cfg.pose_dim:
            raise TrainError(f"clip pose dim {seq.pose_dim} != model {cfg.pose_dim}")
        if seq.frames != need:
            raise TrainError(f"clip has {seq.frames} frames, model needs {need}")
        if not (0 <= clip.label < cfg.classes):
            raise TrainError(f"label {clip.label} outside model classes {cfg.classes}")
        X[i] = seq.data[:cfg.input_frames]
        Y[i] = seq.data[cfg.input_frames:]
        labels[i] = clip.label
    return X, Y, labels


def _trainable(params: ModelParams, mode: str, unfreeze_encoder: bool) -> list[str]:
    if mode == "fine_class":
        names = params.classifier_head()
        if unfreeze_encoder:
            names = names + params.trunk()
        return names
    return params.names()


def _log_line(fh, record: EpochRecord) -> None:
    if fh is not None:
        fh.write(f"{record.epoch},{record.loss_c:.17g},{record.loss_f:.17g},"
                 f"{record.loss_total:.17g},{record.seconds:.3f}\n")
        fh.flush()


def run_schedule(params: ModelParams, clips: list[LabeledClip], tcfg: TrainConfig,
                 schedule: list[tuple[str, int]], class_weights: np.ndarray | None,
                 log_path=None) -> list[EpochRecord]:
    """Run (mode, epochs) stages over the dataset, mutating params in place."""
    cfg = params.config
    X, Y, labels = clips_to_arrays(clips, cfg)
    n = len(clips)
    rng = np.random.default_rng(tcfg.seed)
    history: list[EpochRecord] = []
    epoch_no = 0
    log_fh = open(log_path, "a") if log_path else None
    try:
        for mode, stage_epochs in schedule:
            trainable = _trainable(params, mode, tcfg.unfreeze_encoder)
            opt = AdamW(trainable, lr=tcfg.learning_rate, beta1=tcfg.beta1,
                        beta2=tcfg.beta2, eps=tcfg.adam_eps,
                        weight_decay=tcfg.weight_decay)
            if log_fh is not None:
                log_fh.write(f"# stage {mode}\n")
            for _ in range(stage_epochs):
                epoch_no += 1
                started = time.perf_counter()
                order = rng.permutation(n)
                sum_c = sum_f = sum_t = 0.0
                seen = 0
                for lo in range(0, n, tcfg.batch_size):
                    idx = order[lo:lo + tcfg.batch_size]
                    xb, yb, lb = X[idx], Y[idx], labels[idx]
                    with ad.Tape() as tape:
                        out = forward(xb, params, train=True, rng=rng,
                                      need_forecast=(mode != "fine_class"))
                        lc = losses.cross_entropy(out.logits, lb, weights=class_weights)
                        if mode == "fine_class":
                            breakdown = losses.combined_loss(mode, classification=lc)
                        else:
                            lf, per = losses.forecast_loss(out.layer_forecasts, yb)
                            breakdown = losses.combined_loss(
                                mode, classification=lc, forecast=lf, per_layer=per)
                        if not np.isfinite(breakdown.total_value):
                            raise NonFiniteError(
                                f"non-finite loss at epoch {epoch_no}: {breakdown}")
                        tape.backward(breakdown.total)
                    opt.step(params, {name: params[name].grad for name in trainable})
                    params.zero_grads()
                    w = len(idx)
                    sum_c += breakdown.classification * w
                    sum_t += breakdown.total_value * w
                    if mode != "fine_class":
                        sum_f += breakdown.forecast * w
                    seen += w
                record = EpochRecord(
                    epoch=epoch_no, stage=mode, loss_c=sum_c / seen,
                    loss_f=(sum_f / seen) if mode != "fine_class" else float("nan"),
                    loss_total=sum_t / seen, seconds=time.perf_counter() - started)
                history.append(record)
                _log_line(log_fh, record)
    finally:
        if log_fh is not None:
            log_fh.close()
    return history


def _mode_for(strategy: str) -> str:
    return {"pretrain": "pretrain", "scratch": "scratch",
            "class": "fine_class", "both": "fine_both"}[strategy]


def pretrain(clips: list[LabeledClip], model_config: ModelConfig, tcfg: TrainConfig,
             log_path=None, config_echo: str = "") -> Checkpoint:
    """Joint training of both branches from random init, unweighted CE."""
    if tcfg.strategy != "pretrain":
        raise TrainError(f"pretrain called with strategy {tcfg.strategy!r}")
    params = init_params(model_config, seed=tcfg.seed)
    history = run_schedule(params, clips, tcfg, [("pretrain", tcfg.epochs)],
                           class_weights=None, log_path=log_path)
    return Checkpoint(params, model_config, tcfg, epoch=tcfg.epochs, history=history,
                      config_echo=config_echo)


def finetune(init: Checkpoint, clips: list[LabeledClip], strategy: str,
             tcfg: TrainConfig, class_count: int | None = None,
             log_path=None, config_echo: str = "") -> Checkpoint:
    """Adapt a pre-trained checkpoint; the classifier head is re-initialized
    whenever the class count changes. Class weights come from these clips
    only (the training split)."""
    if strategy not in ("class", "both", "both-then-class"):
        raise TrainError(f"finetune: bad strategy {strategy!r}")
    src_cfg = init.model_config
    labels = [c.label for c in clips]
    classes = class_count if class_count is not None else max(labels) + 1
    if clips and clips[0].poses.pose_dim != src_cfg.pose_dim:
        raise TrainError(f"pose dim {clips[0].poses.pose_dim} incompatible with "
                         f"checkpoint ({src_cfg.pose_dim}); cannot transfer")

    params = init.params.copy()
    if classes != src_cfg.classes:
        cfg = replace(src_cfg, classes=classes)
        head_rng = np.random.default_rng(tcfg.seed)
        bound = 1.0 / np.sqrt(cfg.embed_dim)
        tensors = {n: t for n, t in params.tensors.items() if not n.startswith("cls.")}
        tensors["cls.w"] = ad.Tensor(
            head_rng.uniform(-bound, bound, size=(cfg.embed_dim, classes)),
            requires_grad=True, name="cls.w")
        tensors["cls.b"] = ad.Tensor(np.zeros(classes), requires_grad=True, name="cls.b")
        params = ModelParams(tensors, cfg)
    cfg = params.config

    weights = losses.inverse_frequency_weights(labels, cfg.classes) if tcfg.weighted_ce \
        else None
    if strategy == "both-then-class":
        schedule = [("fine_both", tcfg.stage_epochs[0]), ("fine_class", tcfg.stage_epochs[1])]
    else:
        schedule = [(_mode_for(strategy), tcfg.epochs)]
    history = run_schedule(params, clips, tcfg, schedule, class_weights=weights,
                           log_path=log_path)
    return Checkpoint(params, cfg, tcfg, epoch=tcfg.epochs, history=history,
                      config_echo=config_echo)


def train_scratch(clips: list[LabeledClip], model_config: ModelConfig,
                  tcfg: TrainConfig | None = None, log_path=None,
                  config_echo: str = "") -> Checkpoint:
    """Same joint objective as fine-tuning both branches, but from random
    init and, by default, for twice the epochs."""
    if tcfg is None:
        tcfg = TrainConfig(strategy="scratch", epochs=200)
    if tcfg.strategy != "scratch":
        raise TrainError(f"train_scratch called with strategy {tcfg.strategy!r}")
    params = init_params(model_config, seed=tcfg.seed)
    weights = losses.inverse_frequency_weights(
        [c.label for c in clips], model_config.classes) if tcfg.weighted_ce else None
    history = run_schedule(params, clips, tcfg, [("scratch", tcfg.epochs)],
                           class_weights=weights, log_path=log_path)
    return Checkpoint(params, model_config, tcfg, epoch=tcfg.epochs, history=history,
                      config_echo=config_echo)
