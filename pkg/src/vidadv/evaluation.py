"""Accuracy metrics, PSNR, robustness reports and deterministic table export."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, fmt, run_attack, write_surface_tsv, LossSurface
from .data import Dataset, loop_frames
from .models import Model
from .rng import Rng
from .tensor import Tensor


def predict(model: Model, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits for ``clips`` (B,T,H,W,C), computed in batches without a tape."""
    clips = np.asarray(clips, dtype=np.float32)
    out = []
    with T.no_grad():
        for s in range(0, clips.shape[0], batch_size):
            out.append(model(Tensor(clips[s:s + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, 0), dtype=np.float32)


def clip_accuracy(model: Model, clips: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Fraction of clips whose argmax logit equals the label."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("clip_accuracy: empty clip set")
    return float(np.mean(predict(model, clips, batch_size).argmax(1) == labels))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    e = np.exp(z - z.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def video_scores(model: Model, video: np.ndarray, clip_len: int) -> np.ndarray:
    """Sum of softmax vectors over non-overlapping ``clip_len``-frame windows.

    Videos shorter than ``clip_len`` are looped up to one window; a trailing
    partial window is dropped.
    """
    video = np.asarray(video, dtype=np.float32)
    if video.shape[0] < clip_len:
        video = loop_frames(video, clip_len)
    n = video.shape[0] // clip_len
    windows = video[: n * clip_len].reshape(n, clip_len, *video.shape[1:])
    return _softmax(predict(model, windows)).sum(0)


def video_level_accuracy(model: Model, videos: Sequence[np.ndarray], labels: Sequence[int], clip_len: int) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("video_level_accuracy: empty video set")
    preds = [int(np.argmax(video_scores(model, v, clip_len))) for v in videos]
    return float(np.mean(np.asarray(preds) == labels))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """``-10 log10(mean squared error)`` over all elements, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return 100.0
    return min(100.0, -10.0 * np.log10(mse))


def mean_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Average of per-clip PSNR over the leading batch axis."""
    return float(np.mean([psnr(x, y) for x, y in zip(a, b)]))


# -- robustness reports ---------------------------------------------------------------

def spec_label(spec: AttackSpec | None) -> str:
    if spec is None or spec.eps == 0:
        return "clean"
    return f"{spec.variant}:{spec.eps:g}"


@dataclass
class EvalReport:
    model_id: str
    accuracy: dict[str, float]
    n_clips: int
    seed: int = 0
    alphas: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if "clean" not in self.accuracy:
            raise ValueError("an evaluation report always carries the clean column")
        for k, v in self.accuracy.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 1]")


def robust_accuracy(model: Model, data: Dataset, specs: Sequence[AttackSpec | None], model_id: str = "model",
                    seed: int = 0, alpha_grid: dict[float, Sequence[float]] | Sequence[float] | None = None,
                    batch_size: int = 64) -> EvalReport:
    """Accuracy on attacked copies of every clip, one column per spec.

    Attacks run with ``track_best``. When ``alpha_grid`` is given (a list, or
    a mapping from eps to a list) each PGD column is evaluated at every step
    size on the grid and the strongest one (lowest accuracy, ties to the
    smaller step) is reported together with its step size.
    """
    x, y = data.clips, data.labels
    acc = {"clean": clip_accuracy(model, x, y)}
    alphas: dict[str, float] = {}
    for spec in specs:
        label = spec_label(spec)
        if label == "clean":
            continue
        grid = [spec.alpha]
        if alpha_grid is not None and spec.variant == "pgd":
            g = alpha_grid.get(spec.eps, grid) if isinstance(alpha_grid, dict) else alpha_grid
            grid = sorted(float(a) for a in g)
        best_acc, best_alpha = 2.0, grid[0]
        for a in grid:
            s = spec.with_(alpha=a, track_best=True)
            correct = 0
            for start in range(0, len(y), batch_size):
                xb, yb = x[start:start + batch_size], y[start:start + batch_size]
                rng = Rng(seed, f"eval/{label}/{a:g}/{start}")
                correct += int(np.sum(~run_attack(model, xb, yb, s, rng).success))
            val = correct / len(y)
            if val < best_acc:
                best_acc, best_alpha = val, a
        acc[label] = best_acc
        alphas[label] = best_alpha
    return EvalReport(model_id, acc, len(y), seed, alphas)


@dataclass
class EpochSeries:
    train_acc: list[float]
    val_acc: list[float]

    @property
    def gap(self) -> list[float]:
        return [t - v for t, v in zip(self.train_acc, self.val_acc)]

    @classmethod
    def from_log(cls, log) -> "EpochSeries":
        return cls([e.train_acc for e in log], [e.val_acc for e in log])


# -- export ----------------------------------------------------------------------------

def _columns(reports: Sequence[EvalReport]) -> list[str]:
    cols = ["clean"]
    for r in reports:
        for k in r.accuracy:
            if k not in cols:
                cols.append(k)
    return cols


def emit_tables(reports: Sequence[EvalReport], path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.md`` (markdown, percentages) and ``<path>.tsv`` (fractions).

    Missing cells are left empty. Output depends only on the reports.
    """
    path = Path(path)
    cols = _columns(reports)
    md = ["| model | " + " | ".join(cols) + " |", "|" + "---|" * (len(cols) + 1)]
    tsv = ["model\t" + "\t".join(cols)]
    for r in reports:
        cells = [r.accuracy.get(c) for c in cols]
        md.append(f"| {r.model_id} | " + " | ".join("" if v is None else f"{100 * v:.1f}" for v in cells) + " |")
        tsv.append(r.model_id + "\t" + "\t".join("" if v is None else fmt(v) for v in cells))
    md_path, tsv_path = path.with_suffix(".md"), path.with_suffix(".tsv")
    md_path.write_text("\n".join(md) + "\n", encoding="utf-8")
    tsv_path.write_text("\n".join(tsv) + "\n", encoding="utf-8")
    return md_path, tsv_path


def read_table_tsv(path: str | Path) -> dict[str, dict[str, float]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    cols = lines[0].split("\t")[1:]
    out = {}
    for ln in lines[1:]:
        parts = ln.split("\t")
        out[parts[0]] = {c: float(v) for c, v in zip(cols, parts[1:]) if v != ""}
    return out


def emit_surface(surface: LossSurface, path: str | Path) -> Path:
    """One ``alpha, steps, loss`` row per grid point."""
    path = Path(path)
    write_surface_tsv(surface, path)
    return path


def emit_epoch_series(log, path: str | Path) -> Path:
    """Per-epoch TSV: epoch, train_acc, val_acc, gap, mean_loss, sampled budgets."""
    lines = ["epoch\ttrain_acc\tval_acc\tgap\tmean_loss\tbudgets"]
    for e in log:
        hist = ",".join(f"{k}={v}" for k, v in sorted(e.budgets.items()))
        lines.append(f"{e.epoch}\t{fmt(e.train_acc)}\t{fmt(e.val_acc)}\t{fmt(e.train_acc - e.val_acc)}\t"
                     f"{fmt(e.mean_loss)}\t{hist}")
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
