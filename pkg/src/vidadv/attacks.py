"""White-box video attacks and the step-size analysis tooling.

Clips live in [0, 1]; budgets (``eps``) and step sizes (``alpha``) are given in
8-bit pixel units and divided by 255 internally. Every attack returns a
perturbation that lies in the l-inf ball, vanishes outside its support and
keeps ``x + delta`` inside [0, 1] under float32 arithmetic.

All attacks are batched: ``x`` is ``(B, T, H, W, C)`` and ``y`` is ``(B,)``.
Per-clip gradients come from the *sum* of per-clip losses, so one clip's step
does not depend on the rest of the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .losses import cross_entropy, cw_margin_loss
from .models import Model
from .rng import Rng
from .tensor import Tensor

VARIANTS = ("fgsm", "pgd", "masked-pgd", "frame-border", "saliency-oneshot", "saliency-iterative", "flicker")


@dataclass(frozen=True)
class AttackSpec:
    variant: str = "pgd"
    eps: float = 8.0
    alpha: float = 2.0
    steps: int = 5
    ratio: float = 0.15
    frames: tuple[int, ...] | None = None
    lam: float = 1.0
    beta1: float = 0.1
    beta2: float = 0.9
    margin: float = 0.05
    random_start: bool = False
    track_best: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown attack variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.eps < 0 or self.alpha < 0 or self.steps < 0:
            raise ValueError("eps, alpha and steps must be non-negative")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must lie in (0, 1]")
        if min(self.lam, self.beta1, self.beta2, self.margin) < 0:
            raise ValueError("flicker weights and margin must be non-negative")

    def with_(self, **kw) -> "AttackSpec":
        return replace(self, **kw)


@dataclass
class PerturbationSupport:
    """Where a perturbation may be non-zero.

    ``mode`` is one of ``full``, ``patch`` (per-clip ``tops``/``lefts`` and a
    shared ``height``/``width``), ``border`` (``thickness``), ``frames`` (per-clip
    boolean frame selection) or ``flicker`` (full frames, but one offset per
    frame and channel).
    """

    mode: str = "full"
    tops: np.ndarray | None = None
    lefts: np.ndarray | None = None
    height: int = 0
    width: int = 0
    thickness: int = 0
    frame_mask: np.ndarray | None = None  # (B, T) bool

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        B, Tn, H, W, C = shape
        if self.mode in ("full", "flicker"):
            return np.ones((1, 1, 1, 1, 1), dtype=np.float32)
        if self.mode == "patch":
            m = np.zeros((B, 1, H, W, 1), dtype=np.float32)
            for b in range(B):
                t, l = int(self.tops[b]), int(self.lefts[b])
                if t < 0 or l < 0 or t + self.height > H or l + self.width > W:
                    raise ValueError("patch lies outside the frame")
                m[b, 0, t:t + self.height, l:l + self.width, 0] = 1
            return m
        if self.mode == "border":
            b = self.thickness
            m = np.zeros((1, 1, H, W, 1), dtype=np.float32)
            m[:, :, :b] = m[:, :, H - b:] = 1
            m[:, :, :, :b] = m[:, :, :, W - b:] = 1
            return m
        if self.mode == "frames":
            return self.frame_mask.astype(np.float32).reshape(B, Tn, 1, 1, 1)
        raise ValueError(f"unknown support mode {self.mode!r}")


@dataclass
class AttackResult:
    delta: np.ndarray
    loss_trace: list[float]
    success: np.ndarray  # adversarial prediction != label
    changed: np.ndarray  # adversarial prediction != clean prediction
    steps_used: int
    final_loss: np.ndarray | None = None
    support: PerturbationSupport = field(default_factory=PerturbationSupport)
    frames_perturbed: list[list[int]] | None = None

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if self.success.size else 0.0


@dataclass
class LossSurface:
    alphas: np.ndarray
    steps: np.ndarray
    losses: np.ndarray  # (len(alphas), len(steps))
    eps: float


# -- primitives ---------------------------------------------------------------------

def budget(eps: float) -> np.float32:
    return np.float32(eps / 255.0)


def project_linf(delta: np.ndarray, eps: float, x: np.ndarray) -> np.ndarray:
    """Clip ``delta`` to the eps-ball, then pull ``x + delta`` back into [0, 1].

    Out-of-range coordinates are replaced by ``1 - x`` or ``-x`` rather than by
    ``clip(x + delta) - x``; this keeps the map exactly idempotent in float32.
    """
    e = budget(eps)
    d = np.clip(np.asarray(delta, dtype=np.float32), -e, e)
    s = x + d
    d = np.where(s > 1, np.float32(1) - x, d)
    d = np.where(s < 0, -x, d)
    return d.astype(np.float32, copy=False)


def is_feasible(delta: np.ndarray, x: np.ndarray, eps: float, mask: np.ndarray | None = None) -> bool:
    adv = x + delta
    ok = bool(np.all(np.abs(delta) <= budget(eps)) and np.all(adv >= 0) and np.all(adv <= 1))
    if mask is not None:
        ok = ok and not np.any(delta * (1 - np.broadcast_to(mask, delta.shape)))
    return ok


def check_feasible(delta: np.ndarray, x: np.ndarray, eps: float, mask: np.ndarray | None = None) -> None:
    if not is_feasible(delta, x, eps, mask):
        raise RuntimeError("adversarial example violates its budget, support or value range")


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray, loss: str = "ce",
                   margin: float = 0.05) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-clip loss, gradient of the summed loss w.r.t. ``x``, and logits."""
    with T.frozen(model.parameters()):
        xt = Tensor(x, requires_grad=True)
        logits = model(xt)
        per = cross_entropy(logits, y, "none") if loss == "ce" else cw_margin_loss(logits, y, margin, "none")
        T.tsum(per).backward()
    return per.data, xt.grad, logits.data


def evaluate(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-clip cross-entropy and logits without recording a tape."""
    with T.no_grad():
        logits = model(Tensor(x))
        per = cross_entropy(logits, y, "none")
    return per.data, logits.data


# -- PGD core -----------------------------------------------------------------------

def _pgd(model: Model, x: np.ndarray, y: np.ndarray, eps: float, alpha: float, steps: int,
         mask: np.ndarray, rng: Rng | None, random_start: bool, track_best: bool,
         finalize: bool = True) -> tuple[np.ndarray, list[float], dict]:
    x = np.asarray(x, dtype=np.float32)
    a = np.float32(alpha / 255.0)
    delta = np.zeros_like(x)
    if random_start and eps > 0:
        if rng is None:
            raise ValueError("random_start needs an rng")
        e = budget(eps)
        delta = project_linf(rng.uniform(-e, e, size=x.shape).astype(np.float32) * mask, eps, x)
    trace: list[float] = []
    best = delta.copy()
    best_loss = np.full(x.shape[0], -np.inf)
    best_logits = None
    clean_logits = None
    for i in range(steps):
        per, g, logits = input_gradient(model, x + delta, y)
        if i == 0 and not random_start:
            clean_logits = logits
        trace.append(float(per.mean()))
        if track_best:
            better = per > best_loss
            best[better] = delta[better]
            best_loss = np.where(better, per, best_loss)
            best_logits = logits if best_logits is None else np.where(better[:, None], logits, best_logits)
        delta = project_linf(delta + a * np.sign(g).astype(np.float32) * mask, eps, x)
    info: dict = {}
    if not finalize:
        return (best if track_best and steps else delta), trace, info
    per, logits = evaluate(model, x + delta, y)
    trace.append(float(per.mean()))
    if track_best:
        better = per > best_loss
        best[better] = delta[better]
        best_loss = np.where(better, per, best_loss)
        best_logits = logits if best_logits is None else np.where(better[:, None], logits, best_logits)
        delta, per, logits = best, best_loss, best_logits
    if clean_logits is None:
        clean_logits = evaluate(model, x, y)[1] if (steps or random_start) else logits
    info.update(final_loss=np.asarray(per, dtype=np.float64), logits=logits, clean_logits=clean_logits)
    return delta, trace, info


def _result(delta, trace, info, y, steps, support) -> AttackResult:
    pred = info["logits"].argmax(1)
    return AttackResult(delta=delta, loss_trace=trace, success=pred != y,
                        changed=pred != info["clean_logits"].argmax(1), steps_used=steps,
                        final_loss=info["final_loss"], support=support)


def fgsm(model: Model, x, y, eps: float, support: PerturbationSupport | None = None) -> AttackResult:
    """Single signed-gradient step of size eps (8-bit units) on the support."""
    support = support or PerturbationSupport()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    mask = support.mask(x.shape)
    delta, trace, info = _pgd(model, x, y, eps, eps, 1, mask, None, False, False)
    return _result(delta, trace, info, y, 1, support)


def pgd_linf(model: Model, x, y, spec: AttackSpec, rng: Rng | None = None,
             support: PerturbationSupport | None = None, finalize: bool = True) -> AttackResult | np.ndarray:
    """``M`` iterations of ``delta <- Proj(delta + alpha * sign(grad))``.

    With ``finalize=False`` only the perturbation is returned (no extra forward pass);
    the trainers use this.
    """
    support = support or PerturbationSupport()
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    mask = support.mask(x.shape)
    delta, trace, info = _pgd(model, x, y, spec.eps, spec.alpha, spec.steps, mask, rng,
                              spec.random_start, spec.track_best, finalize)
    if not finalize:
        return delta
    return _result(delta, trace, info, y, spec.steps, support)


# -- supports ------------------------------------------------------------------------

def patch_support(shape: Sequence[int], ratio: float, rng: Rng) -> PerturbationSupport:
    B, _, H, W, _ = shape
    if not 0 < ratio <= 1:
        raise ValueError("patch ratio must lie in (0, 1]")
    ph, pw = int(math.floor(H * math.sqrt(ratio))), int(math.floor(W * math.sqrt(ratio)))
    if ph == 0 or pw == 0:
        raise ValueError(f"patch ratio {ratio} gives an empty patch on {H}x{W} frames")
    tops = rng.integers(0, H - ph + 1, size=B)
    lefts = rng.integers(0, W - pw + 1, size=B)
    return PerturbationSupport("patch", tops=tops, lefts=lefts, height=ph, width=pw)


def border_thickness(H: int, W: int, r: float) -> int:
    """Smallest ``b >= 1`` whose border pixel count ``2b(H+W) - 4b^2`` is closest to ``r*H*W``."""
    if not 0 < r <= 1:
        raise ValueError("border ratio must lie in (0, 1]")
    target = r * H * W
    best_b, best_gap = 1, math.inf
    for b in range(1, (min(H, W) + 1) // 2 + 1):
        gap = abs(2 * b * (H + W) - 4 * b * b - target)
        if gap < best_gap:
            best_b, best_gap = b, gap
    return best_b


def masked_pgd(model: Model, x, y, eps: float, alpha: float, steps: int, r: float, rng: Rng,
               random_start: bool = False, track_best: bool = False) -> AttackResult:
    """PGD restricted to one ``floor(H*sqrt(r)) x floor(W*sqrt(r))`` patch per clip, fixed over time."""
    x = np.asarray(x, dtype=np.float32)
    support = patch_support(x.shape, r, rng)
    spec = AttackSpec("pgd", eps, alpha, steps, random_start=random_start, track_best=track_best)
    return pgd_linf(model, x, y, spec, rng, support)


def frame_border_attack(model: Model, x, y, eps: float, alpha: float, steps: int, r: float,
                        rng: Rng | None = None, random_start: bool = False,
                        track_best: bool = False) -> AttackResult:
    """PGD restricted to a border of ``border_thickness(H, W, r)`` pixels in every frame."""
    x = np.asarray(x, dtype=np.float32)
    b = border_thickness(x.shape[2], x.shape[3], r)
    support = PerturbationSupport("border", thickness=b)
    spec = AttackSpec("pgd", eps, alpha, steps, random_start=random_start, track_best=track_best)
    return pgd_linf(model, x, y, spec, rng, support)


# -- frame saliency -------------------------------------------------------------------

def saliency_scores(model: Model, x, y) -> np.ndarray:
    """Per-frame l1 norm of the cross-entropy gradient; shape ``(B, T)``."""
    _, g, _ = input_gradient(model, np.asarray(x, dtype=np.float32), np.asarray(y))
    return np.abs(g.astype(np.float64)).sum(axis=(2, 3, 4))


def frame_saliency_oneshot(model: Model, x, y, eps: float) -> AttackResult:
    """One signed step of size eps on every frame at once."""
    return fgsm(model, x, y, eps, PerturbationSupport("full"))


def frame_saliency_iterative(model: Model, x, y, eps: float, alpha: float, inner_steps: int) -> AttackResult:
    """Perturb frames one at a time in decreasing saliency order until the clip is misclassified.

    Frames are ranked once. Each selected frame gets ``inner_steps`` PGD steps
    (earlier frames keep their perturbation). A clip stops as soon as its
    prediction differs from its label, checked after every step.
    """
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    B, Tn = x.shape[:2]
    a = np.float32(alpha / 255.0)
    clean_loss, g, clean_logits = input_gradient(model, x, y)
    scores = np.abs(g.astype(np.float64)).sum(axis=(2, 3, 4))
    order = np.argsort(-scores, axis=1, kind="stable")
    fooled = clean_logits.argmax(1) != y
    delta = np.zeros_like(x)
    frame_mask = np.zeros((B, Tn), dtype=bool)
    trace = [float(clean_loss.mean())]
    steps_used = 0
    logits = clean_logits
    for k in range(Tn):
        active = ~fooled
        if not active.any():
            break
        frame_mask[np.flatnonzero(active), order[active, k]] = True
        m = np.zeros((B, Tn, 1, 1, 1), dtype=np.float32)
        m[np.flatnonzero(active), order[active, k]] = 1
        for _ in range(inner_steps):
            if not m.any():
                break
            per, g, _ = input_gradient(model, x + delta, y)
            delta = project_linf(delta + a * np.sign(g).astype(np.float32) * m, eps, x)
            steps_used += 1
            per, logits = evaluate(model, x + delta, y)
            trace.append(float(per.mean()))
            fooled |= logits.argmax(1) != y
            m[fooled] = 0
    final_loss, logits = evaluate(model, x + delta, y)
    support = PerturbationSupport("frames", frame_mask=frame_mask)
    perturbed = [[int(t) for t in order[b, :frame_mask[b].sum()]] for b in range(B)]
    pred = logits.argmax(1)
    return AttackResult(delta, trace, pred != y, pred != clean_logits.argmax(1), steps_used,
                        final_loss, support, perturbed)


# -- flickering ----------------------------------------------------------------------

def flicker_regularizers(u: Tensor) -> tuple[Tensor, Tensor]:
    """Thickness and roughness of per-frame offsets ``u`` shaped ``(B, T, C)``, one value per clip.

    thickness = mean of u^2; roughness = mean squared first temporal difference.
    """
    B, Tn, C = u.shape
    thick = T.tsum(u * u, axis=(1, 2)) * (1.0 / (Tn * C))
    if Tn < 2:
        return thick, T.tsum(u * 0.0, axis=(1, 2))
    diff = u[:, 1:] - u[:, :-1]
    rough = T.tsum(diff * diff, axis=(1, 2)) * (1.0 / ((Tn - 1) * C))
    return thick, rough


def flicker_attack(model: Model, x, y, lam: float = 1.0, beta1: float = 0.1, beta2: float = 0.9,
                   steps: int = 100, step: float = 5.0, margin: float = 0.05,
                   eps: float = 255.0) -> AttackResult:
    """Spatially uniform per-frame, per-channel offsets found by gradient descent.

    Minimises ``lam * (beta1 * thickness + beta2 * roughness) + cw_margin`` per
    clip, with offsets measured in 8-bit units. After every step the offsets are
    clipped to the eps-ball and to the range that keeps every pixel of the frame
    valid, so the perturbation stays exactly constant over H and W.
    """
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    B, Tn, H, W, C = x.shape
    e = float(budget(eps))
    lo = np.maximum(-e, -x.min(axis=(2, 3)))  # (B, T, C), [0,1] units
    hi = np.minimum(e, 1.0 - x.max(axis=(2, 3)))
    u = np.zeros((B, Tn, C), dtype=np.float32)  # 8-bit units
    trace: list[float] = []
    params = model.parameters()

    def offsets(u_arr: np.ndarray) -> np.ndarray:
        d = np.clip((u_arr / np.float32(255.0)).astype(np.float32), lo, hi).astype(np.float32)
        return d

    for _ in range(steps):
        with T.frozen(params):
            ut = Tensor(u, requires_grad=True)
            d = T.reshape(ut * (1.0 / 255.0), (B, Tn, 1, 1, C))
            logits = model(Tensor(x) + d)
            cw = cw_margin_loss(logits, y, margin, "none")
            thick, rough = flicker_regularizers(ut)
            obj = T.tsum(cw + (thick * beta1 + rough * beta2) * lam)
            obj.backward()
        trace.append(float(obj.data) / B)
        u = (u - np.float32(step) * ut.grad).astype(np.float32)
        u = (offsets(u) * np.float32(255.0)).astype(np.float32)
    dflat = offsets(u)
    delta = np.ascontiguousarray(np.broadcast_to(dflat[:, :, None, None, :], x.shape), dtype=np.float32)
    final_loss, logits = evaluate(model, x + delta, y)
    clean_logits = evaluate(model, x, y)[1]
    pred = logits.argmax(1)
    return AttackResult(delta, trace, pred != y, pred != clean_logits.argmax(1), steps, final_loss,
                        PerturbationSupport("flicker"))


# -- dispatch -----------------------------------------------------------------------

def run_attack(model: Model, x, y, spec: AttackSpec, rng: Rng | None = None) -> AttackResult:
    """Run any variant described by ``spec``."""
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    v = spec.variant
    if v == "fgsm":
        support = PerturbationSupport()
        if spec.frames is not None:
            fm = np.zeros((x.shape[0], x.shape[1]), dtype=bool)
            fm[:, list(spec.frames)] = True
            support = PerturbationSupport("frames", frame_mask=fm)
        return fgsm(model, x, y, spec.eps, support)
    if v == "pgd":
        support = None
        if spec.frames is not None:
            fm = np.zeros((x.shape[0], x.shape[1]), dtype=bool)
            fm[:, list(spec.frames)] = True
            support = PerturbationSupport("frames", frame_mask=fm)
        return pgd_linf(model, x, y, spec, rng, support)
    if v == "masked-pgd":
        return masked_pgd(model, x, y, spec.eps, spec.alpha, spec.steps, spec.ratio,
                          rng if rng is not None else Rng(0, "masked-pgd"),
                          spec.random_start, spec.track_best)
    if v == "frame-border":
        return frame_border_attack(model, x, y, spec.eps, spec.alpha, spec.steps, spec.ratio, rng,
                                   spec.random_start, spec.track_best)
    if v == "saliency-oneshot":
        return frame_saliency_oneshot(model, x, y, spec.eps)
    if v == "saliency-iterative":
        return frame_saliency_iterative(model, x, y, spec.eps, spec.alpha, max(1, spec.steps))
    if v == "flicker":
        return flicker_attack(model, x, y, spec.lam, spec.beta1, spec.beta2, spec.steps, spec.alpha,
                              spec.margin, spec.eps)
    raise ValueError(f"unknown attack variant {v!r}")


def perturb(model: Model, x, y, spec: AttackSpec, rng: Rng | None = None) -> np.ndarray:
    """Adversarial perturbation only; PGD skips the bookkeeping forward pass."""
    if spec.variant == "pgd" and spec.frames is None and not spec.track_best:
        return pgd_linf(model, x, y, spec, rng, finalize=False)
    return run_attack(model, x, y, spec, rng).delta


# -- step-size analysis --------------------------------------------------------------

def loss_surface(model: Model, x, y, eps: float, alpha_grid: Sequence[float], steps_grid: Sequence[int],
                 batch_size: int = 32) -> LossSurface:
    """Mean cross-entropy after ``M`` plain PGD steps for every (alpha, M) pair at fixed eps."""
    alphas = np.asarray(sorted(float(a) for a in alpha_grid))
    steps = np.asarray(sorted(int(m) for m in steps_grid))
    if alphas.size == 0 or steps.size == 0:
        raise ValueError("alpha and step grids must be non-empty")
    x = np.asarray(x, dtype=np.float32)
    y = np.asarray(y)
    m_max = int(steps.max())
    totals = np.zeros((alphas.size, m_max + 1))
    mask = np.ones((1, 1, 1, 1, 1), dtype=np.float32)
    for start in range(0, x.shape[0], batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        for i, a in enumerate(alphas):
            _, trace, _ = _pgd(model, xb, yb, eps, a, m_max, mask, None, False, False)
            totals[i] += np.asarray(trace) * xb.shape[0]
    mean = totals / x.shape[0]
    return LossSurface(alphas, steps, mean[:, steps], float(eps))


def optimal_alpha(surface: LossSurface) -> float:
    """Step size maximising the loss at the largest M; ties go to the smaller alpha."""
    col = surface.losses[:, int(np.argmax(surface.steps))]
    order = np.argsort(surface.alphas, kind="stable")
    best = order[int(np.argmax(col[order]))]
    return float(surface.alphas[best])


def fit_alpha_vs_eps(points: Sequence[tuple[float, float]]) -> tuple[float, float, float]:
    """Ordinary least squares ``alpha = slope * eps + intercept``; returns (slope, intercept, r^2)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 2 or np.ptp(pts[:, 0]) == 0:
        raise ValueError("degenerate fit: need at least two distinct eps values")
    e, a = pts[:, 0], pts[:, 1]
    em, am = e.mean(), a.mean()
    slope = float(((e - em) * (a - am)).sum() / ((e - em) ** 2).sum())
    intercept = float(am - slope * em)
    ss_res = float(((a - (slope * e + intercept)) ** 2).sum())
    ss_tot = float(((a - am) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return slope, intercept, r2


def linear_step_size(eps: float) -> float:
    """The linear step-size rule alpha = 0.2 * (eps + 1)."""
    return 0.2 * (eps + 1.0)


def fmt(v: float) -> str:
    return f"{float(v):.6g}"


def write_surface_tsv(surface: LossSurface, path: str | Path) -> None:
    lines = ["alpha\tsteps\tloss"]
    for i, a in enumerate(surface.alphas):
        for j, m in enumerate(surface.steps):
            lines.append(f"{fmt(a)}\t{int(m)}\t{fmt(surface.losses[i, j])}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_surface_tsv(path: str | Path, eps: float = float("nan")) -> LossSurface:
    rows = [ln.split("\t") for ln in Path(path).read_text(encoding="utf-8").splitlines()[1:] if ln]
    alphas = sorted({float(r[0]) for r in rows})
    steps = sorted({int(r[1]) for r in rows})
    losses = np.full((len(alphas), len(steps)), np.nan)
    for a, m, v in rows:
        losses[alphas.index(float(a)), steps.index(int(m))] = float(v)
    return LossSurface(np.asarray(alphas), np.asarray(steps), losses, eps)


def write_alpha_fit_tsv(points: Sequence[tuple[float, float]], path: str | Path) -> None:
    lines = ["eps\talpha_hat"] + [f"{fmt(e)}\t{fmt(a)}" for e, a in points]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
