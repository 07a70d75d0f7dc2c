"""Command-line entry point: gen-data, train, sweep, eval, attack.

Every command writes into a fresh temporary directory next to the requested
output and renames it into place only after ``manifest.json`` (listing every
produced file with its SHA-256) has been written.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import tensor as T
from .attacks import (VARIANTS, AttackSpec, fit_alpha_vs_eps, fmt, linear_step_size, loss_surface, optimal_alpha,
                      run_attack, write_alpha_fit_tsv)
from .checkpoint import CheckpointError, load_models, save_models
from .data import (MOTION_CLASSES, ClipFormatError, Dataset, VideoClip, load_dataset_dir, make_splits, save_clip,
                   write_dataset_dir)
from .evaluation import emit_epoch_series, emit_surface, emit_tables, robust_accuracy
from .models import Composite, Model
from .rng import Rng
from .training import (CurriculumSchedule, GanConfig, TrainConfig, adaptive_at, adaptive_attack_type_at,
                       adversarial_train, at_frozen_generator, curriculum_at, default_step_size,
                       generative_at_end_to_end, train_ape_gan, train_benign)

OUT_ENV = "VIDADV_OUT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
MODES = ("benign", "at", "aat", "cat-up", "cat-down", "ape", "frozen-gat", "gat", "aat-types")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    version: str
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0


# -- value parsers ----------------------------------------------------------------------

def float_list(text: str) -> list[float]:
    """``"0,2,4"`` or a range ``"0..12"`` (step 2 when the ends are even, else 1) or ``"a:b:step"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (float(v) for v in text.split(".."))
        step = 2.0 if lo % 2 == 0 and hi % 2 == 0 else 1.0
        return [float(v) for v in np.arange(lo, hi + step / 2, step)]
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("range step must be positive")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(max(n, 0))]
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}") from e


def int_list(text: str) -> list[int]:
    vals = float_list(text)
    if any(v != int(v) for v in vals):
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")
    return [int(v) for v in vals]


def str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def parse_bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def parse_attack(token: str, steps: int = 5) -> AttackSpec | None:
    """``clean`` or ``variant:eps[:alpha]`` (alpha defaults to eps / 4)."""
    if token == "clean":
        return None
    parts = token.split(":")
    if parts[0] not in VARIANTS:
        raise UsageError(f"unknown attack {parts[0]!r}; valid names: clean, {', '.join(VARIANTS)}")
    try:
        eps = float(parts[1]) if len(parts) > 1 else 8.0
        alpha = float(parts[2]) if len(parts) > 2 else eps / 4
    except ValueError as e:
        raise UsageError(f"bad attack token {token!r}") from e
    return AttackSpec(parts[0], eps, alpha, steps)


# -- config file ----------------------------------------------------------------------

def read_config(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys may be prefixed ``<command>.``."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file {path}: {e}") from e
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, command: str,
                 values: dict[str, str]) -> None:
    """Type-check config values and install them as defaults (flags still win)."""
    actions = {a.dest: a for p in (parser, sub) for a in p._actions if a.dest not in ("help", "command")}
    defaults = {}
    for key, raw in values.items():
        k = key
        if "." in k:
            scope, k = k.split(".", 1)
            if scope != command:
                continue
        dest = k.replace("-", "_")
        if dest not in actions or dest == "config":
            raise UsageError(f"unknown config key {key!r}")
        act = actions[dest]
        try:
            if act.const is True and act.nargs == 0:
                val = parse_bool(raw)
            elif act.type is not None:
                val = act.type(raw)
            else:
                val = raw
        except (argparse.ArgumentTypeError, ValueError) as e:
            raise UsageError(f"config key {key!r}: {e}") from e
        if act.choices is not None and val not in act.choices:
            raise UsageError(f"config key {key!r}: {val!r} not in {sorted(act.choices)}")
        defaults[dest] = val
    sub.set_defaults(**defaults)


# -- output handling --------------------------------------------------------------------

def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def default_out(command: str, args) -> Path:
    root = Path(os.environ.get(OUT_ENV, "runs"))
    tag = getattr(args, "mode", None) or command
    return root / f"{command}-{tag}-seed{args.seed}" if tag != command else root / f"{command}-seed{args.seed}"


class AtomicOutput:
    """Stage files in a temp dir; rename to ``final`` after the manifest is written."""

    def __init__(self, final: Path, force: bool):
        self.final = Path(final)
        if self.final.exists() and any(self.final.iterdir()) and not force:
            raise UsageError(f"output directory {self.final} exists and is not empty (use --force)")
        self.final.parent.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=f".{self.final.name}.", dir=self.final.parent))

    def commit(self, manifest: RunManifest) -> Path:
        files = sorted(p for p in self.tmp.rglob("*") if p.is_file())
        manifest.outputs = {str(p.relative_to(self.tmp)): sha256(p) for p in files}
        (self.tmp / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n",
                                                encoding="utf-8")
        if self.final.exists():
            shutil.rmtree(self.final)
        os.replace(self.tmp, self.final)
        return self.final

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _config_dict(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config", "threads", "force", "out")}


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args, out: Path) -> dict[str, str]:
    if args.classes < 2 or args.classes > len(MOTION_CLASSES):
        raise UsageError(f"unsupported number of classes {args.classes}; choose 2..{len(MOTION_CLASSES)}")
    splits = make_splits(args.seed, args.classes, args.n_train, args.n_val, args.n_test,
                         args.frames, args.height, args.width, args.channels)
    write_dataset_dir(out, splits)
    return {}


def _load_split(root: str, split: str, seed: int) -> Dataset:
    try:
        return load_dataset_dir(root, split, seed=seed)
    except FileNotFoundError as e:
        raise DataError(f"dataset not found: {e}") from e


def _load_model(path: str, key: str = "F") -> Model:
    try:
        models, _ = load_models(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    if key not in models:
        raise DataError(f"checkpoint {path} has no model {key!r} (has {', '.join(models)})")
    return models[key]


def _eval_target(path: str) -> Model:
    """Classifier from a checkpoint; wrapped as F o G when the file also carries a generator."""
    try:
        models, _ = load_models(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    if "F" not in models:
        raise DataError(f"checkpoint {path} has no classifier")
    return Composite(models["G"], models["F"]) if "G" in models else models["F"]


def _train_config(args, attack: AttackSpec | None) -> TrainConfig:
    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size, batches_per_epoch=args.batches_per_epoch,
                       optimizer=args.optimizer, lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
                       lr_patience=args.lr_patience, seed=args.seed, attack=attack)


def cmd_train(args, out: Path) -> dict[str, str]:
    train = _load_split(args.data, "train", args.seed)
    val = _load_split(args.data, "val", args.seed)
    inputs = {"data": str(args.data)}
    model = None
    if args.init:
        model = _load_model(args.init)
        inputs["init"] = args.init
    step_rule = linear_step_size if args.step_rule == "linear" else default_step_size
    alpha = args.alpha if args.alpha is not None else step_rule(args.eps)
    attack = AttackSpec("pgd", args.eps, alpha, args.steps)
    cfg = _train_config(args, attack)
    gan = GanConfig(gamma1=args.gamma1, gamma2=args.gamma2, d_steps=args.d_steps, lr=args.gan_lr,
                    refine=args.refine)
    models: dict[str, Model] = {}
    log = None
    mode = args.mode
    if mode == "benign":
        st = train_benign(cfg, train, val, model)
    elif mode == "at":
        st = adversarial_train(cfg, train, val, model)
    elif mode == "aat":
        st = adaptive_at(cfg, train, val, args.eps_set, step_rule, args.xi, args.probe_size, model)
    elif mode == "aat-types":
        types = [parse_attack(f"{t}:{args.eps:g}:{alpha:g}", args.steps) for t in args.types]
        st = adaptive_attack_type_at(cfg, train, val, types, args.xi, args.probe_size, model)
    elif mode in ("cat-up", "cat-down"):
        sched = CurriculumSchedule(tuple(args.eps_set), "up" if mode == "cat-up" else "down")
        st = curriculum_at(cfg, train, val, sched, step_rule, model)
    elif mode == "ape":
        if not args.classifier:
            raise UsageError("--mode ape needs --classifier (checkpoint of the attacked classifier)")
        inputs["classifier"] = args.classifier
        F = _load_model(args.classifier)
        gs = train_ape_gan(cfg, gan, train, F, attack)
        models.update(F=F, G=gs.G, D=gs.D)
        cols = ["epoch", "batch", "d_loss", "g_obj", "mse"]
        lines = ["\t".join(cols)] + ["\t".join(fmt(e[c]) for c in cols) for e in gs.log]
        (out / "gan_log.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        st = None
    elif mode == "frozen-gat":
        if not args.generator:
            raise UsageError("--mode frozen-gat needs --generator (checkpoint containing G)")
        inputs["generator"] = args.generator
        st = at_frozen_generator(cfg, _load_model(args.generator, "G"), train, val, model)
    elif mode == "gat":
        st = generative_at_end_to_end(cfg, gan, train, val, model)
    else:
        raise UsageError(f"invalid mode {mode!r}")
    if st is not None:
        models = {"F": st.model, **st.extra_models}
        log = st.log
        emit_epoch_series(log, out / "epochs.tsv")
    save_models(out / "model.ckpt", models, {"F": st.optimizer} if st is not None else None)
    return inputs


def cmd_sweep(args, out: Path) -> dict[str, str]:
    if not args.alpha_grid or not args.steps_grid or not args.eps:
        raise UsageError("eps, alpha and step grids must be non-empty")
    model = _eval_target(args.checkpoint)
    ds = _load_split(args.data, args.split, args.seed)
    n = min(args.n_clips, len(ds)) if args.n_clips else len(ds)
    x, y = ds.clips[:n], ds.labels[:n]
    points = []
    for eps in args.eps:
        grid = [a * eps for a in args.alpha_grid] if args.relative else args.alpha_grid
        surf = loss_surface(model, x, y, eps, grid, args.steps_grid, args.batch_size)
        emit_surface(surf, out / f"surface_eps{eps:g}.tsv")
        points.append((eps, optimal_alpha(surf)))
    write_alpha_fit_tsv(points, out / "alpha_hat.tsv")
    lines = ["slope\tintercept\tr2"]
    if len(points) >= 2 and len({p[0] for p in points}) >= 2:
        slope, icpt, r2 = fit_alpha_vs_eps(points)
        lines.append(f"{fmt(slope)}\t{fmt(icpt)}\t{fmt(r2)}")
    (out / "fit.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"checkpoint": args.checkpoint, "data": str(args.data)}


def cmd_eval(args, out: Path) -> dict[str, str]:
    specs = [parse_attack(t, args.steps) for t in args.attacks]
    model = _eval_target(args.checkpoint)
    ds = _load_split(args.data, args.split, args.seed)
    if args.n_clips:
        ds = ds.subset(np.arange(min(args.n_clips, len(ds))))
    grid = None
    if args.alpha_grid:
        grid = {s.eps: [a * s.eps for a in args.alpha_grid] if args.relative else args.alpha_grid
                for s in specs if s is not None}
    report = robust_accuracy(model, ds, specs, Path(args.checkpoint).stem, args.seed, grid)
    if args.suboptimal_alpha:
        halved = [s.with_(alpha=report.alphas.get(f"{s.variant}:{s.eps:g}", s.alpha) / 2) if s else None
                  for s in specs]
        sub = robust_accuracy(model, ds, halved, report.model_id + "-half-alpha", args.seed)
        emit_tables([report, sub], out / "report")
    else:
        emit_tables([report], out / "report")
    if report.alphas:
        lines = ["attack\talpha"] + [f"{k}\t{fmt(v)}" for k, v in report.alphas.items()]
        (out / "alphas.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"checkpoint": args.checkpoint, "data": str(args.data)}


def cmd_attack(args, out: Path) -> dict[str, str]:
    if args.variant not in VARIANTS:
        raise UsageError(f"unknown attack {args.variant!r}; valid names: {', '.join(VARIANTS)}")
    model = _eval_target(args.checkpoint)
    ds = _load_split(args.data, args.split, args.seed)
    n = min(args.n_clips, len(ds)) if args.n_clips else len(ds)
    spec = AttackSpec(args.variant, args.eps, args.alpha, args.steps, ratio=args.ratio,
                      random_start=args.random_start, track_best=True)
    rng = Rng(args.seed, f"attack/{args.variant}")
    success = np.zeros(0, dtype=bool)
    (out / "clips").mkdir()
    for start in range(0, n, args.batch_size):
        x, y = ds.clips[start:start + args.batch_size], ds.labels[start:start + args.batch_size]
        res = run_attack(model, x, y, spec, rng.child(start))
        success = np.concatenate([success, res.success])
        adv = x + res.delta
        for i in range(len(y)):
            cid = ds.clip(start + i).id
            save_clip(out / "clips" / f"{cid}.avl", VideoClip(adv[i], int(y[i]), cid))
    lines = ["variant\teps\tn_clips\tsuccess_rate\trobust_accuracy",
             f"{args.variant}\t{fmt(args.eps)}\t{n}\t{fmt(success.mean())}\t{fmt(1 - success.mean())}"]
    (out / "summary.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"checkpoint": args.checkpoint, "data": str(args.data)}


# -- parser ----------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file; flags override it")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all cores)")
    common.add_argument("--out", help=f"output directory (default under ${OUT_ENV} or ./runs)")
    common.add_argument("--force", action="store_true", help="replace an existing output directory")

    p = argparse.ArgumentParser(prog="vidadv", description="Adversarial attacks and defences for video classifiers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    subs = {}

    g = sub.add_parser("gen-data", parents=[common], help="generate a MovingShapes dataset")
    g.add_argument("--classes", type=int, default=10)
    g.add_argument("--frames", type=int, default=16)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--n-train", type=int, default=100, help="training clips per class")
    g.add_argument("--n-val", type=int, default=10, help="validation clips per class")
    g.add_argument("--n-test", type=int, default=20, help="test clips per class")
    g.set_defaults(func=cmd_gen_data)
    subs["gen-data"] = g

    t = sub.add_parser("train", parents=[common], help="train a classifier or a defence")
    t.add_argument("--data", required=True)
    t.add_argument("--mode", choices=MODES, default="benign")
    t.add_argument("--epochs", type=int, default=10)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--batches-per-epoch", type=int, default=None)
    t.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-3)
    t.add_argument("--lr-patience", type=int, default=10)
    t.add_argument("--eps", type=float, default=8.0)
    t.add_argument("--alpha", type=float, default=None, help="step size (default from --step-rule)")
    t.add_argument("--steps", type=int, default=5)
    t.add_argument("--step-rule", choices=("eps", "linear"), default="eps", help="alpha = eps or 0.2 (eps + 1)")
    t.add_argument("--eps-set", type=float_list, default=[0, 2, 4, 6, 8, 10, 12])
    t.add_argument("--xi", type=int, default=10)
    t.add_argument("--probe-size", type=int, default=512)
    t.add_argument("--types", type=str_list, default=["masked-pgd", "frame-border", "saliency-oneshot",
                                                      "saliency-iterative"])
    t.add_argument("--init", help="checkpoint to start the classifier from")
    t.add_argument("--classifier", help="classifier checkpoint attacked while training the generator (ape)")
    t.add_argument("--generator", help="checkpoint holding a trained generator (frozen-gat)")
    t.add_argument("--gamma1", type=float, default=0.7)
    t.add_argument("--gamma2", type=float, default=0.3)
    t.add_argument("--d-steps", type=int, default=1)
    t.add_argument("--gan-lr", type=float, default=2e-4)
    t.add_argument("--refine", type=int, default=32, help="channels of the generator's full-resolution branch")
    t.set_defaults(func=cmd_train)
    subs["train"] = t

    s = sub.add_parser("sweep", parents=[common], help="loss surface over step size and iterations")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--eps", type=float_list, default=[2, 4, 8, 12])
    s.add_argument("--alpha-grid", type=float_list, default=float_list("0.25:4:0.25"))
    s.add_argument("--relative", action="store_true", help="alpha grid is a multiple of eps")
    s.add_argument("--steps-grid", type=int_list, default=[1, 2, 5, 10])
    s.add_argument("--n-clips", type=int, default=0)
    s.add_argument("--batch-size", type=int, default=32)
    s.set_defaults(func=cmd_sweep)
    subs["sweep"] = s

    e = sub.add_parser("eval", parents=[common], help="clean and robust accuracy table")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--attacks", type=str_list, default=["clean", "pgd:4", "pgd:8", "pgd:12", "pgd:15"])
    e.add_argument("--steps", type=int, default=5)
    e.add_argument("--alpha-grid", type=float_list, default=None, help="step sizes tried per attack")
    e.add_argument("--relative", action="store_true", help="alpha grid is a multiple of eps")
    e.add_argument("--suboptimal-alpha", action="store_true", help="also evaluate at half the tuned step size")
    e.add_argument("--n-clips", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    subs["eval"] = e

    a = sub.add_parser("attack", parents=[common], help="attack clips and write them out")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test")
    a.add_argument("--variant", default="pgd")
    a.add_argument("--eps", type=float, default=8.0)
    a.add_argument("--alpha", type=float, default=2.0)
    a.add_argument("--steps", type=int, default=5)
    a.add_argument("--ratio", type=float, default=0.15)
    a.add_argument("--random-start", action="store_true")
    a.add_argument("--n-clips", type=int, default=0)
    a.add_argument("--batch-size", type=int, default=32)
    a.set_defaults(func=cmd_attack)
    subs["attack"] = a
    return p, subs


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    try:
        if args.config:
            apply_config(parser, subs[args.command], args.command, read_config(args.config))
            args = parser.parse_args(argv)
        out = Path(args.out) if args.out else default_out(args.command, args)
        staging = AtomicOutput(out, args.force)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    start = time.time()
    threads = args.threads or os.cpu_count() or 1
    try:
        with threadpool_limits(limits=threads), T.detect_nonfinite(), np.errstate(over="ignore", invalid="ignore"):
            inputs = args.func(args, staging.tmp)
        manifest = RunManifest(args.command, _config_dict(args), args.seed, __version__, inputs or {})
        manifest.wall_clock = round(time.time() - start, 3)
        staging.commit(manifest)
    except UsageError as e:
        staging.abort()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ClipFormatError, CheckpointError, FileNotFoundError) as e:
        staging.abort()
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        staging.abort()
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        staging.abort()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
