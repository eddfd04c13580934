"""Command-line front end.

Every run is driven by a plain-text config file (ini-style section headers,
``key = value`` lines) plus a handful of overriding flags. Unknown sections or
keys are rejected, listing every offender at once. The fully resolved config
is echoed into each artifact (checkpoints, reports) so any of them can be
regenerated from the echo plus its seed; output locations are deliberately
not part of the echo.

Commands: synth, ingest, pretrain, finetune, eval, fewshot, forecast,
check-grad. Exit code 0 on success; on failure one machine-parsable line
``error: <category>: <message>`` goes to stderr.
"""

from __future__ import annotations

import argparse
import configparser
import io
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as md
from . import evaluate as ev
from . import losses
from . import model as gm
from . import train as tr


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _parse_floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip())


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# section -> key -> (default, parser, help)
SCHEMA: dict[str, dict[str, tuple] ] = {
    "model": {
        "joints": (25, int, "skeleton joint count; pose dim is 3*joints"),
        "embed_dim": (128, int, "transformer embedding width"),
        "layers": (4, int, "encoder and decoder depth"),
        "heads": (4, int, "attention heads"),
        "ff_dim": (256, int, "feed-forward width"),
        "classes": (4, int, "classification classes"),
        "input_frames": (60, int, "observed frames per clip (t)"),
        "forecast_frames": (40, int, "predicted frames per clip (M)"),
        "dropout": (0.1, float, "training dropout rate"),
    },
    "train": {
        "epochs": (100, int, "training epochs"),
        "learning_rate": (1e-4, float, "constant learning rate"),
        "batch_size": (16, int, "clips per optimization step"),
        "seed": (0, int, "master seed for init, shuffling, dropout"),
        "strategy": ("pretrain", str, "pretrain|scratch|class|both|both-then-class"),
        "stage_epochs": ((50, 50), _parse_ints, "epochs per stage for both-then-class"),
        "weight_decay": (0.01, float, "decoupled weight decay"),
        "beta1": (0.9, float, "first-moment decay"),
        "beta2": (0.999, float, "second-moment decay"),
        "adam_eps": (1e-8, float, "optimizer epsilon"),
        "unfreeze_encoder": (False, _parse_bool, "class-only strategy also trains encoder"),
        "weighted_ce": (True, _parse_bool, "inverse-frequency class weights when fine-tuning"),
    },
    "data": {
        "manifest": ("", str, "path to a dataset manifest"),
        "window": (100, int, "clip length in frames"),
        "stride": (100, int, "window stride in frames"),
        "head_joint": (3, int, "joint index used for scale normalization"),
        "apply_normalize": (True, _parse_bool, "center and scale ingested skeletons"),
    },
    "synth": {
        "classes": (4, int, "synthetic class count"),
        "clips_per_class": (8, int, "clips per class"),
        "joints": (25, int, "synthetic skeleton joints"),
        "frames": (100, int, "frames per synthetic clip"),
        "seed": (0, int, "synthesis seed"),
    },
    "experiment": {
        "fractions": ((0.25, 0.5, 0.75), _parse_floats, "training-set fractions"),
        "runs": (3, int, "resampled runs per fraction"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def model_config(self) -> gm.ModelConfig:
        m = self.values["model"]
        return gm.ModelConfig(
            pose_dim=3 * m["joints"], embed_dim=m["embed_dim"], layers=m["layers"],
            heads=m["heads"], ff_dim=m["ff_dim"], classes=m["classes"],
            input_frames=m["input_frames"], forecast_frames=m["forecast_frames"],
            dropout=m["dropout"])

    def train_config(self) -> tr.TrainConfig:
        t = self.values["train"]
        return tr.TrainConfig(
            epochs=t["epochs"], learning_rate=t["learning_rate"],
            batch_size=t["batch_size"], seed=t["seed"], strategy=t["strategy"],
            stage_epochs=tuple(t["stage_epochs"]), weight_decay=t["weight_decay"],
            beta1=t["beta1"], beta2=t["beta2"], adam_eps=t["adam_eps"],
            unfreeze_encoder=t["unfreeze_encoder"], weighted_ce=t["weighted_ce"])

    def synth_spec(self) -> md.SynthSpec:
        s = self.values["synth"]
        return md.SynthSpec(classes=s["classes"], clips_per_class=s["clips_per_class"],
                            joints=s["joints"], frames=s["frames"], seed=s["seed"])


def default_config() -> RunConfig:
    return RunConfig({sec: {k: spec[0] for k, spec in keys.items()}
                      for sec, keys in SCHEMA.items()})


def load_config(path: str | None) -> RunConfig:
    """Read and validate a config file; every unknown or bad key is reported."""
    cfg = default_config()
    if not path:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise
    except (OSError, configparser.Error) as e:
        raise ConfigError(f"{path}: {e}") from None
    problems = []
    for section in parser.sections():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                problems.append(f"unknown key [{section}] {key}")
                continue
            _, parse, _ = SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except ValueError:
                problems.append(f"bad value [{section}] {key} = {raw!r}")
    if problems:
        raise ConfigError(f"{path}: " + "; ".join(problems))
    return cfg


def render_config(cfg: RunConfig) -> str:
    """Canonical text form of a fully resolved config; parsing it back yields
    the same values."""
    out = io.StringIO()
    for section, keys in SCHEMA.items():
        out.write(f"[{section}]\n")
        for key in keys:
            out.write(f"{key} = {_fmt(cfg.values[section][key])}\n")
        out.write("\n")
    return out.getvalue()


ERROR_CATEGORIES = (
    (ConfigError, "config"),
    (md.DataFormatError, "data"),
    (losses.LossError, "loss"),
    (gm.ModelError, "model"),
    (tr.NonFiniteError, "numeric"),
    (tr.TrainError, "train"),
    (ev.EvalError, "eval"),
    (ad.ShapeError, "shape"),
    (FileNotFoundError, "io"),
    (OSError, "io"),
)


def _categorize(exc: BaseException) -> str:
    for etype, cat in ERROR_CATEGORIES:
        if isinstance(exc, etype):
            return cat
    return "internal"


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg.values["train"]["seed"] = args.seed
        cfg.values["synth"]["seed"] = args.seed
    if getattr(args, "strategy", None):
        cfg.values["train"]["strategy"] = args.strategy
    if getattr(args, "stage_epochs", None):
        cfg.values["train"]["stage_epochs"] = _parse_ints(args.stage_epochs)
    if getattr(args, "epochs", None) is not None:
        cfg.values["train"]["epochs"] = args.epochs
    if getattr(args, "manifest", None):
        cfg.values["data"]["manifest"] = args.manifest
    if getattr(args, "fraction", None) is not None:
        cfg.values["experiment"]["fractions"] = (args.fraction,)
    if getattr(args, "fractions", None):
        cfg.values["experiment"]["fractions"] = _parse_floats(args.fractions)
    if getattr(args, "runs", None) is not None:
        cfg.values["experiment"]["runs"] = args.runs
    return cfg


def _load_dataset(cfg: RunConfig):
    mpath = cfg["data"]["manifest"]
    if not mpath:
        raise ConfigError("no dataset manifest configured ([data] manifest or --manifest)")
    manifest = md.read_manifest(mpath)
    model_joints = cfg["model"]["joints"]
    if manifest.joints != model_joints:
        raise ConfigError(f"manifest joints {manifest.joints} != [model] joints {model_joints}")
    lookup = md.load_clips(mpath, manifest)
    return manifest, lookup


def _echo(cfg: RunConfig) -> str:
    return render_config(cfg)


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    spec = cfg.synth_spec()
    manifest, clips = md.synth_dataset(spec)
    mpath = md.write_dataset(args.out, manifest, clips)
    print(f"wrote {len(clips)} clips and {mpath}")
    return 0


def _read_sources(path) -> list[tuple[str, str, str]]:
    rows = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise md.DataFormatError(
                f"{path}: line {ln}: expected filename<TAB>subject<TAB>label-or-votes")
        rows.append((fields[0], fields[1], fields[2]))
    if not rows:
        raise md.DataFormatError(f"{path}: no source rows")
    return rows


def cmd_ingest(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    dcfg = cfg["data"]
    seed = cfg["train"]["seed"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries, clips = [], []
    max_label = 0
    for fname, subject, labelspec in _read_sources(args.sources):
        seq = md.parse_skeleton_file(str(Path(args.input) / fname))
        if labelspec.startswith("votes:"):
            scores = [int(v) for v in labelspec[len("votes:"):].split(",")]
            label = md.majority_label(scores, rng_seed=seed)
        else:
            label = int(labelspec)
        if dcfg["apply_normalize"]:
            seq = md.normalize(seq, head_joint=dcfg["head_joint"])
        for i, clip_seq in enumerate(md.window(seq, dcfg["window"], dcfg["stride"])):
            path = f"{Path(fname).stem}_{i:03d}.clip"
            clips.append(md.LabeledClip(clip_seq, label=label, subject_id=subject,
                                        source_id=Path(fname).stem))
            entries.append(md.ManifestEntry(path=path, subject_id=subject, label=label))
            max_label = max(max_label, label)
    if not clips:
        raise md.DataFormatError("ingest produced no clips (inputs shorter than the window?)")
    manifest = md.DatasetManifest(entries, class_count=max_label + 1,
                                  joints=clips[0].poses.joints)
    mpath = md.write_dataset(out, manifest, clips)
    print(f"wrote {len(clips)} clips and {mpath}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    cfg.values["train"]["strategy"] = "pretrain"
    manifest, lookup = _load_dataset(cfg)
    if manifest.class_count > cfg["model"]["classes"]:
        raise ConfigError(f"manifest has {manifest.class_count} classes, "
                          f"[model] classes is {cfg['model']['classes']}")
    clips = [lookup[e.path] for e in manifest.entries]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = tr.pretrain(clips, cfg.model_config(), cfg.train_config(),
                     log_path=out / "train.log", config_echo=_echo(cfg))
    ck.save(out / "checkpoint.ckpt")
    print(f"pretrained {ck.epoch} epochs; final loss "
          f"{ck.history[-1].loss_total:.4f}; wrote {out / 'checkpoint.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    strategy = cfg["train"]["strategy"]
    if strategy not in ("class", "both", "both-then-class"):
        raise ConfigError(f"finetune needs strategy class|both|both-then-class, "
                          f"got {strategy!r}")
    init = tr.load_checkpoint(args.init)
    manifest, lookup = _load_dataset(cfg)
    clips = [lookup[e.path] for e in manifest.entries]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = tr.finetune(init, clips, strategy, cfg.train_config(),
                     class_count=cfg["model"]["classes"],
                     log_path=out / "train.log", config_echo=_echo(cfg))
    ck.save(out / "checkpoint.ckpt")
    print(f"fine-tuned ({strategy}) {ck.epoch} epochs; wrote {out / 'checkpoint.ckpt'}")
    return 0


def _experiment(args, fractions, runs) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    strategy = cfg["train"]["strategy"]
    if strategy == "pretrain":
        raise ConfigError("evaluation needs strategy class|both|both-then-class|scratch")
    manifest, lookup = _load_dataset(cfg)
    init = tr.load_checkpoint(args.init) if getattr(args, "init", None) else None
    pipeline = ev.training_pipeline(cfg.model_config(), cfg.train_config(), strategy,
                                    lookup, init=init)
    spec = ev.ExperimentSpec(pipeline=pipeline, entries=manifest.entries,
                             class_count=cfg["model"]["classes"],
                             fractions=fractions, runs=runs,
                             base_seed=cfg["train"]["seed"], config_echo=_echo(cfg))
    report = ev.run_experiment(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(ev.report_text(report))
    (out / "plotdata.csv").write_text(report.plot_table())
    for frac, metrics in report.per_fraction().items():
        f1 = metrics["f1"]
        print(f"fraction {frac:g}: macro-F1 {f1[0]:.4f} ± {f1[1]:.4f}")
    print(f"wrote {out / 'report.txt'} and {out / 'plotdata.csv'}")
    return 0


def cmd_eval(args) -> int:
    return _experiment(args, fractions=(1.0,), runs=1)


def cmd_fewshot(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    exp = cfg["experiment"]
    return _experiment(args, fractions=tuple(exp["fractions"]), runs=exp["runs"])


def cmd_forecast(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    params, _ = gm.load_params(args.init)
    manifest, lookup = _load_dataset(cfg)
    clips = [lookup[e.path] for e in manifest.entries]
    paths = ev.export_forecasts(params, clips, args.out)
    print(f"wrote {len(paths)} trajectory files to {args.out}")
    return 0


def cmd_check_grad(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if args.config is None:
        # default audit size: small enough for a quick run
        cfg.values["model"].update(joints=2, embed_dim=8, layers=2, heads=2, ff_dim=12,
                                   classes=3, input_frames=4, forecast_frames=3,
                                   dropout=0.0)
    mcfg = cfg.model_config()
    seed = cfg["train"]["seed"]
    rng = np.random.default_rng(seed)
    params = gm.init_params(mcfg, seed=seed)
    x = rng.uniform(-1.0, 1.0, size=(mcfg.input_frames, mcfg.pose_dim))
    # offset keeps L1 residuals clear of the nondifferentiable point
    target = rng.uniform(2.0, 3.0, size=(mcfg.forecast_frames, mcfg.pose_dim))
    label = int(rng.integers(mcfg.classes))

    def build():
        out = gm.forward(x, params)
        lc = losses.cross_entropy(out.logits, label)
        lf, _ = losses.forecast_loss(out.layer_forecasts, target)
        return ad.add(lc, lf)

    worst, errors = ad.check_gradients(build, params.tensors)
    worst_name = max(errors, key=errors.get)
    print(f"max_relative_error={worst:.3e} worst_parameter={worst_name} "
          f"parameters={params.param_count()}")
    if worst > args.tolerance:
        print(f"error: numeric: gradient check failed: {worst:.3e} > {args.tolerance:g}",
              file=sys.stderr)
        return 1
    return 0


# ---------------------------------------------------------------------------
# parser

def _formatter(prog):
    return argparse.ArgumentDefaultsHelpFormatter(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gaitcast", formatter_class=_formatter,
        description="Skeleton motion forecasting and severity classification pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, fn, help_):
        p = sub.add_parser(name, formatter_class=_formatter, help=help_, description=help_)
        p.set_defaults(fn=fn)
        p.add_argument("--config", default=None, help="run config file (ini-style)")
        p.add_argument("--seed", type=int, default=None,
                       help="override every seed in the config")
        return p

    p = add("synth", cmd_synth, "generate a synthetic labeled motion dataset")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("ingest", cmd_ingest, "parse skeleton files into normalized windowed clips")
    p.add_argument("--input", required=True, help="directory of skeleton text files")
    p.add_argument("--sources", required=True,
                   help="TSV of filename, subject, label or votes:a,b,c")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = add("pretrain", cmd_pretrain, "jointly train forecasting and classification")
    p.add_argument("--manifest", default=None, help="override [data] manifest")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")

    p = add("finetune", cmd_finetune, "adapt a pre-trained checkpoint to new labels")
    p.add_argument("--init", required=True, help="initial checkpoint path")
    p.add_argument("--manifest", default=None, help="override [data] manifest")
    p.add_argument("--strategy", choices=["class", "both", "both-then-class"],
                   default=None, help="override [train] strategy")
    p.add_argument("--stage-epochs", dest="stage_epochs", default=None,
                   help="epochs per stage for both-then-class, e.g. 50,50")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.add_argument("--out", required=True, help="output directory for checkpoint and log")

    p = add("eval", cmd_eval, "leave-one-subject-out evaluation with full training data")
    p.add_argument("--init", default=None, help="checkpoint for fine-tune strategies")
    p.add_argument("--manifest", default=None, help="override [data] manifest")
    p.add_argument("--strategy", choices=["class", "both", "both-then-class", "scratch"],
                   default=None, help="override [train] strategy")
    p.add_argument("--stage-epochs", dest="stage_epochs", default=None,
                   help="epochs per stage for both-then-class")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.add_argument("--out", required=True, help="output directory for the report")

    p = add("fewshot", cmd_fewshot, "few-shot evaluation over training-set fractions")
    p.add_argument("--init", default=None, help="checkpoint for fine-tune strategies")
    p.add_argument("--manifest", default=None, help="override [data] manifest")
    p.add_argument("--strategy", choices=["class", "both", "both-then-class", "scratch"],
                   default=None, help="override [train] strategy")
    p.add_argument("--stage-epochs", dest="stage_epochs", default=None,
                   help="epochs per stage for both-then-class")
    p.add_argument("--epochs", type=int, default=None, help="override [train] epochs")
    p.add_argument("--fraction", type=float, default=None,
                   help="single training fraction (overrides [experiment] fractions)")
    p.add_argument("--fractions", default=None,
                   help="comma list of fractions, e.g. 0.25,0.5,0.75")
    p.add_argument("--runs", type=int, default=None, help="override [experiment] runs")
    p.add_argument("--out", required=True, help="output directory for report and plot data")

    p = add("forecast", cmd_forecast, "export input/truth/predicted pose trajectories")
    p.add_argument("--init", required=True, help="checkpoint path")
    p.add_argument("--manifest", default=None, help="override [data] manifest")
    p.add_argument("--out", required=True, help="output directory for trajectory files")

    p = add("check-grad", cmd_check_grad,
            "finite-difference audit of the full model gradient")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="maximum accepted relative error")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # one-line, categorized
        print(f"error: {_categorize(exc)}: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
