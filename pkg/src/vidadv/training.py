"""Training procedures: benign, adversarial, adaptive, curriculum and generative AT.

Every trainer shares :func:`fit_classifier`; they differ only in which attack
(if any) replaces each batch. Randomness is split into labelled streams
(shuffling, attacks, budget sampling) so that a trainer whose attacks are
no-ops reproduces benign training bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attacks import AttackSpec, check_feasible, evaluate, perturb
from .data import Dataset, iterate_batches
from .losses import bce_with_logits, cross_entropy, mse_loss
from .models import ClassifierF, Composite, DiscriminatorD, GeneratorG, Model
from .optim import Optimizer, OptimizerState, PlateauSchedule
from .rng import Rng
from .tensor import Tensor


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    batches_per_epoch: int | None = None
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple[float, float] = (0.5, 0.999)
    weight_decay: float = 1e-3
    lr_patience: int = 10
    lr_factor: float = 0.1
    seed: int = 0
    attack: AttackSpec | None = None
    eval_every: int = 1
    widths: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or (self.batches_per_epoch is not None and self.batches_per_epoch < 1):
            raise ValueError("batch size and batches per epoch must be >= 1")

    def optimizer_state(self) -> OptimizerState:
        return OptimizerState(self.optimizer, lr=self.lr, momentum=self.momentum, betas=tuple(self.betas),
                              weight_decay=self.weight_decay)


@dataclass
class GanConfig:
    gamma1: float = 0.7
    gamma2: float = 0.3
    d_steps: int = 1
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    widths_g: tuple[int, ...] = (32, 64)
    refine: int = 32
    widths_d: tuple[int, ...] = (16, 32, 64)

    def __post_init__(self):
        if self.gamma1 < 0 or self.gamma2 < 0:
            raise ValueError("gamma weights must be non-negative")
        if self.d_steps < 0:
            raise ValueError("d_steps must be >= 0")


@dataclass
class EpochLog:
    epoch: int
    train_acc: float
    val_acc: float
    mean_loss: float
    val_loss: float
    lr: float
    budgets: dict[str, int] = field(default_factory=dict)
    extra: dict[str, float] = field(default_factory=dict)

    @property
    def gap(self) -> float:
        return self.train_acc - self.val_acc


@dataclass
class TrainState:
    model: Model
    optimizer: OptimizerState
    log: list[EpochLog] = field(default_factory=list)
    epoch: int = 0
    extra_models: dict[str, Model] = field(default_factory=dict)
    distribution: "BudgetDistribution | None" = None


# -- budget distribution (adaptive sampling) ---------------------------------------------

@dataclass
class BudgetDistribution:
    """Discrete distribution over budgets or attack types, re-estimated from losses.

    ``values`` are labels (budgets or attack names); ``probs`` sum to one.
    After normalisation each probability is floored at ``floor / len(values)``
    and the vector renormalised, so no arm starves permanently.
    """

    values: list
    probs: np.ndarray
    period: int = 10
    floor: float = 0.01
    losses: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if len(self.values) == 0:
            raise ValueError("budget set must be non-empty")
        if self.probs.shape != (len(self.values),):
            raise ValueError("one probability per value is required")
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, values: Sequence, period: int = 10, floor: float = 0.01) -> "BudgetDistribution":
        n = len(values)
        if n == 0:
            raise ValueError("budget set must be non-empty")
        return cls(list(values), np.full(n, 1.0 / n), period, floor)


def update_budget_distribution(dist: BudgetDistribution, losses: Sequence[float]) -> BudgetDistribution:
    """``P_i = loss_i / sum_j loss_j`` (uniform if every loss is zero), then the floor."""
    losses = np.asarray(losses, dtype=np.float64)
    if losses.shape != dist.probs.shape:
        raise ValueError(f"expected {dist.probs.size} losses, got {losses.size}")
    if np.any(losses < 0) or not np.all(np.isfinite(losses)):
        raise ValueError("losses must be finite and non-negative")
    total = losses.sum()
    p = np.full(losses.size, 1.0 / losses.size) if total == 0 else losses / total
    if dist.floor > 0:
        p = np.maximum(p, dist.floor / p.size)
        p = p / p.sum()
    return BudgetDistribution(list(dist.values), p, dist.period, dist.floor, losses)


def sample_budget(dist: BudgetDistribution, rng: Rng):
    """Inverse-CDF draw of one value."""
    cdf = np.cumsum(dist.probs)
    u = rng.random()
    i = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return dist.values[min(i, len(dist.values) - 1)]


# -- curriculum -----------------------------------------------------------------------

@dataclass
class CurriculumSchedule:
    levels: tuple[float, ...]
    direction: str = "up"

    def __post_init__(self):
        if self.direction not in ("up", "down"):
            raise ValueError("direction must be 'up' or 'down'")
        if not self.levels:
            raise ValueError("curriculum needs at least one level")

    def budgets(self, epochs: int) -> list[float]:
        """Budget per epoch: equal contiguous blocks, the last block takes the remainder.

        The down schedule is the exact reversal of the up schedule.
        """
        levels = sorted(self.levels)
        n = len(levels)
        if n > epochs:
            raise ValueError(f"{n} curriculum levels do not fit in {epochs} epochs")
        block = epochs // n
        seq = [levels[min(k // block, n - 1)] for k in range(epochs)]
        return seq if self.direction == "up" else seq[::-1]


def default_step_size(eps: float) -> float:
    """alpha = eps, the configuration of the strongest fixed-budget defence."""
    return float(eps)


# -- core loop ----------------------------------------------------------------------

BatchPlan = Callable[[int, int, Rng], "AttackSpec | None"]


def _accuracy_and_loss(model: Model, ds: Dataset, batch_size: int = 64) -> tuple[float, float]:
    if len(ds) == 0:
        return float("nan"), float("nan")
    correct, total = 0, 0.0
    for x, y in iterate_batches(ds, batch_size):
        per, logits = evaluate(model, x, y)
        correct += int((logits.argmax(1) == y).sum())
        total += float(per.sum())
    return correct / len(ds), total / len(ds)


def _attack_batch(target: Model, x: np.ndarray, y: np.ndarray, spec: AttackSpec | None, rng: Rng) -> np.ndarray:
    if spec is None or spec.eps == 0 or spec.steps == 0:
        return x
    delta = perturb(target, x, y, spec, rng)
    check_feasible(delta, x, spec.eps)
    return x + delta


def fit_classifier(cfg: TrainConfig, train: Dataset, val: Dataset | None, model: Model | None = None,
                   plan: BatchPlan | None = None, attack_target: Model | None = None,
                   forward: Model | None = None,
                   on_epoch_end: Callable[[TrainState, int], None] | None = None,
                   train_loss: Callable | None = None,
                   extra_optimizers: Sequence[Optimizer] = ()) -> TrainState:
    """Shared training loop.

    ``plan(epoch, batch, rng)`` chooses the attack spec for a batch; attacks are
    run against ``attack_target`` (default: the model) and the classifier is
    trained on ``forward(x_adv)`` (default: ``model(x_adv)``). ``train_loss(x,
    x_adv, y)`` may replace the objective; it returns ``(loss, logits, stats)``
    and ``extra_optimizers`` are stepped alongside the classifier's.
    """
    model = model or ClassifierF(train.num_classes, cfg.widths, train.clips.shape[-1], seed=cfg.seed)
    opt_state = cfg.optimizer_state()
    opt = Optimizer(model.parameters(), opt_state)
    sched = PlateauSchedule(opt_state, cfg.lr_factor, cfg.lr_patience)
    state = TrainState(model, opt_state)
    target = attack_target or model
    fwd = forward or model
    base = Rng(cfg.seed, "train")
    for epoch in range(cfg.epochs):
        shuffle = base.child(f"shuffle/{epoch}")
        attack_rng = base.child(f"attack/{epoch}")
        plan_rng = base.child(f"plan/{epoch}")
        correct, seen, loss_sum = 0, 0, 0.0
        budgets: dict[str, int] = {}
        extras: dict[str, list[float]] = {}
        for n, (x, y) in enumerate(iterate_batches(train, cfg.batch_size, shuffle)):
            if cfg.batches_per_epoch is not None and n >= cfg.batches_per_epoch:
                break
            spec = plan(epoch, n, plan_rng) if plan else cfg.attack
            key = "clean" if spec is None or spec.eps == 0 or spec.steps == 0 else _spec_key(spec)
            budgets[key] = budgets.get(key, 0) + 1
            x_adv = _attack_batch(target, x, y, spec, attack_rng.child(n))
            if train_loss is None:
                logits = fwd(Tensor(x_adv))
                loss = cross_entropy(logits, y)
            else:
                loss, logits, stats = train_loss(x, x_adv, y)
                for k, v in stats.items():
                    extras.setdefault(k, []).append(v)
            if not np.isfinite(loss.data):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}, batch {n}")
            for o in (opt, *extra_optimizers):
                o.zero_grad()
            loss.backward()
            for o in (opt, *extra_optimizers):
                o.step()
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
            loss_sum += float(loss.data) * len(y)
        if val is not None and len(val) and (epoch + 1) % max(1, cfg.eval_every) == 0:
            val_acc, val_loss = _accuracy_and_loss(fwd, val)
        else:
            val_acc, val_loss = float("nan"), float("nan")
        if np.isfinite(val_loss):
            sched.step(val_loss)
        state.log.append(EpochLog(epoch, correct / max(seen, 1), val_acc, loss_sum / max(seen, 1), val_loss,
                                  opt_state.lr, budgets, {k: float(np.mean(v)) for k, v in extras.items()}))
        state.epoch = epoch + 1
        if on_epoch_end is not None:
            on_epoch_end(state, epoch)
    return state


def _spec_key(spec: AttackSpec) -> str:
    return f"{spec.variant}:{spec.eps:g}"


# -- trainers ------------------------------------------------------------------------

def train_benign(cfg: TrainConfig, train: Dataset, val: Dataset | None = None, model: Model | None = None) -> TrainState:
    return fit_classifier(cfg, train, val, model, plan=lambda e, n, r: None)


def adversarial_train(cfg: TrainConfig, train: Dataset, val: Dataset | None = None,
                      model: Model | None = None) -> TrainState:
    """Every batch is replaced by ``x + delta`` from the fixed attack in ``cfg.attack``."""
    if cfg.attack is None:
        raise ValueError("adversarial training needs cfg.attack")
    return fit_classifier(cfg, train, val, model)


def _probe_losses(model: Model, probe: Dataset, arms: Sequence[AttackSpec], rng: Rng, batch_size: int,
                  target: Model | None = None) -> np.ndarray:
    """Summed cross-entropy of ``model`` on freshly attacked probe clips, one entry per arm."""
    target = target or model
    losses = np.zeros(len(arms))
    for i, spec in enumerate(arms):
        arm_rng = rng.child(i)
        for n, (x, y) in enumerate(iterate_batches(probe, batch_size)):
            x_adv = _attack_batch(target, x, y, spec, arm_rng.child(n))
            per, _ = evaluate(model, x_adv, y)
            losses[i] += float(per.sum())
    return losses


def adaptive_arms_at(cfg: TrainConfig, train: Dataset, val: Dataset | None, arms: Sequence[AttackSpec],
                     labels: Sequence, xi: int = 10, probe: Dataset | None = None, probe_size: int = 512,
                     model: Model | None = None) -> TrainState:
    """Adaptive sampling over a set of attack specs ("arms").

    Each batch samples one arm from the distribution; every
    ``max(1, min(xi, epochs // len(arms)))`` epochs the distribution is
    re-estimated from per-arm losses on a fixed probe subset.
    """
    if not arms:
        raise ValueError("adaptive training needs at least one budget or attack type")
    dist_box = [BudgetDistribution.uniform(list(range(len(arms))), period=xi)]
    period = max(1, min(xi, cfg.epochs // len(arms) if cfg.epochs >= len(arms) else 1))
    probe = probe if probe is not None else (val if val is not None and len(val) else train)
    probe = probe.subset(np.arange(min(probe_size, len(probe))))
    history: list[np.ndarray] = []
    budget_rng = Rng(cfg.seed, "aat/budget")

    def plan(epoch, n, _rng):
        return arms[sample_budget(dist_box[0], budget_rng)]

    def on_epoch_end(state: TrainState, epoch: int):
        if (epoch + 1) % period == 0 and len(arms) > 1:
            losses = _probe_losses(state.model, probe, arms, Rng(cfg.seed, f"aat/probe/{epoch}"), cfg.batch_size)
            dist_box[0] = update_budget_distribution(dist_box[0], losses)
        history.append(dist_box[0].probs.copy())
        state.log[-1].extra.update({f"p[{labels[i]}]": float(p) for i, p in enumerate(dist_box[0].probs)})

    state = fit_classifier(cfg, train, val, model, plan=plan, on_epoch_end=on_epoch_end)
    state.distribution = BudgetDistribution(list(labels), dist_box[0].probs, period, dist_box[0].floor,
                                            dist_box[0].losses)
    return state


def adaptive_at(cfg: TrainConfig, train: Dataset, val: Dataset | None, budgets: Sequence[float],
                step_size: Callable[[float], float] = default_step_size, xi: int = 10,
                probe_size: int = 512, model: Model | None = None) -> TrainState:
    """Adaptive AT over attack budgets with ``alpha = step_size(eps)``."""
    if len(budgets) == 0:
        raise ValueError("budget set E must be non-empty")
    base = cfg.attack or AttackSpec("pgd")
    arms = [base.with_(eps=float(e), alpha=float(step_size(e))) for e in budgets]
    return adaptive_arms_at(cfg, train, val, arms, [float(e) for e in budgets], xi, None, probe_size, model)


def adaptive_attack_type_at(cfg: TrainConfig, train: Dataset, val: Dataset | None,
                            types: Sequence[AttackSpec], xi: int = 10, probe_size: int = 512,
                            model: Model | None = None) -> TrainState:
    """Adaptive AT whose distribution ranges over attack types instead of budgets."""
    if len(types) == 0:
        raise ValueError("attack type set must be non-empty")
    return adaptive_arms_at(cfg, train, val, list(types), [t.variant for t in types], xi, None,
                            probe_size, model)


def curriculum_at(cfg: TrainConfig, train: Dataset, val: Dataset | None, schedule: CurriculumSchedule,
                  step_size: Callable[[float], float] = default_step_size,
                  model: Model | None = None) -> TrainState:
    """AT whose budget follows ``schedule`` epoch by epoch."""
    seq = schedule.budgets(cfg.epochs)
    base = cfg.attack or AttackSpec("pgd")
    specs = [base.with_(eps=float(e), alpha=float(step_size(e))) for e in seq]
    state = fit_classifier(cfg, train, val, model, plan=lambda e, n, r: specs[e])
    for entry, e in zip(state.log, seq):
        entry.extra["eps"] = float(e)
    return state


# -- 3D APE-GAN ------------------------------------------------------------------------

def _adam(params, gan_cfg: GanConfig) -> Optimizer:
    return Optimizer(params, OptimizerState("adam", lr=gan_cfg.lr, betas=tuple(gan_cfg.betas)))


def _d_step(G: Model, D: Model, d_opt: Optimizer, x: np.ndarray, x_adv: np.ndarray, gan_cfg: GanConfig) -> float:
    """Maximise log D(x) + log(1 - D(G(x_adv))) by minimising the matching BCE."""
    loss_val = 0.0
    for _ in range(gan_cfg.d_steps):
        with T.no_grad():
            fake = G(Tensor(x_adv)).data
        loss = bce_with_logits(D(Tensor(x)), True) + bce_with_logits(D(Tensor(fake)), False)
        d_opt.zero_grad()
        loss.backward()
        d_opt.step()
        loss_val = float(loss.data)
    return loss_val


def _g_terms(G: Model, D: Model, x: np.ndarray, x_adv: np.ndarray, gan_cfg: GanConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Generator objective gamma1 * mse - gamma2 * log D(G(x_adv)); returns (objective, mse, G(x_adv))."""
    out = G(Tensor(x_adv))
    mse = mse_loss(out, x)
    obj = mse * gan_cfg.gamma1
    if gan_cfg.gamma2:
        with T.frozen(D.parameters()):
            obj = obj + bce_with_logits(D(out), True) * gan_cfg.gamma2
    return obj, mse, out


@dataclass
class GanState:
    G: GeneratorG
    D: DiscriminatorD
    log: list[dict] = field(default_factory=list)


def _attacked_copy(classifier: Model, ds: Dataset, attack: AttackSpec, rng: Rng, batch_size: int) -> np.ndarray:
    out = np.empty_like(ds.clips)
    for n, start in enumerate(range(0, len(ds), batch_size)):
        sl = slice(start, start + batch_size)
        out[sl] = _attack_batch(classifier, ds.clips[sl], ds.labels[sl], attack, rng.child(n))
    return out


def train_ape_gan(cfg: TrainConfig, gan_cfg: GanConfig, train: Dataset, classifier: Model,
                  attack: AttackSpec | None = None, G: GeneratorG | None = None,
                  D: DiscriminatorD | None = None, probe: tuple[np.ndarray, np.ndarray] | None = None) -> GanState:
    """Alternating D-step / G-step training of the denoising generator.

    Adversarial inputs are crafted against ``classifier`` directly (not through G).
    The classifier never changes, so a deterministic attack (no random start)
    is run once per training clip and reused every epoch; random-start attacks
    are regenerated per batch. If ``probe`` = (clips, labels) is given, the
    generator's MSE on a fixed attacked copy is logged per step as ``probe_mse``.
    """
    attack = attack or cfg.attack or AttackSpec("pgd", 8, 2, 5)
    C = train.clips.shape[-1]
    G = G or GeneratorG(C, gan_cfg.widths_g, seed=cfg.seed, refine=gan_cfg.refine)
    D = D or DiscriminatorD(C, gan_cfg.widths_d, seed=cfg.seed)
    g_opt, d_opt = _adam(G.parameters(), gan_cfg), _adam(D.parameters(), gan_cfg)
    state = GanState(G, D)
    base = Rng(cfg.seed, "ape")
    probe_adv = None
    if probe is not None:
        px, py = np.asarray(probe[0], dtype=np.float32), np.asarray(probe[1])
        probe_adv = (px, _attack_batch(classifier, px, py, attack, base.child("probe")))
    cached = None
    if not attack.random_start:
        cached = _attacked_copy(classifier, train, attack, base.child("attack"), 32)
    for epoch in range(cfg.epochs):
        order = base.child(f"shuffle/{epoch}").permutation(len(train))
        attack_rng = base.child(f"attack/{epoch}")
        for n, start in enumerate(range(0, len(order), cfg.batch_size)):
            if cfg.batches_per_epoch is not None and n >= cfg.batches_per_epoch:
                break
            idx = order[start:start + cfg.batch_size]
            x, y = train.clips[idx], train.labels[idx]
            if cached is not None:
                x_adv = cached[idx]
            else:
                x_adv = _attack_batch(classifier, x, y, attack, attack_rng.child(n))
            d_loss = _d_step(G, D, d_opt, x, x_adv, gan_cfg) if gan_cfg.gamma2 and gan_cfg.d_steps else 0.0
            obj, mse, _ = _g_terms(G, D, x, x_adv, gan_cfg)
            g_opt.zero_grad()
            obj.backward()
            g_opt.step()
            entry = {"epoch": epoch, "batch": n, "d_loss": d_loss, "g_obj": float(obj.data), "mse": float(mse.data)}
            if probe_adv is not None:
                with T.no_grad():
                    entry["probe_mse"] = float(mse_loss(G(Tensor(probe_adv[1])), probe_adv[0]).data)
            state.log.append(entry)
    return state


def at_frozen_generator(cfg: TrainConfig, G: Model, train: Dataset, val: Dataset | None = None,
                        model: Model | None = None) -> TrainState:
    """Adversarially train F on ``F(G(x + delta))`` with G fixed; attacks go through F o G."""
    if cfg.attack is None:
        raise ValueError("frozen-generator AT needs cfg.attack")
    model = model or ClassifierF(train.num_classes, cfg.widths, train.clips.shape[-1], seed=cfg.seed)
    composite = Composite(G, model)
    g_params = G.parameters()
    flags = [p.requires_grad for p in g_params]
    for p in g_params:
        p.requires_grad = False
    try:
        state = fit_classifier(cfg, train, val, model, attack_target=composite, forward=composite)
    finally:
        for p, f in zip(g_params, flags):
            p.requires_grad = f
    state.extra_models["G"] = G
    return state


def generative_at_end_to_end(cfg: TrainConfig, gan_cfg: GanConfig, train: Dataset, val: Dataset | None = None,
                             model: Model | None = None, G: GeneratorG | None = None,
                             D: DiscriminatorD | None = None) -> TrainState:
    """Joint training of F, G and D under attacks crafted through F o G.

    Per batch: attack through the composite, ``d_steps`` D-steps, then one joint
    step of F and G on ``gamma1 * mse + gamma2 * gan_term + CE(F(G(x_adv)), y)``.
    """
    if cfg.attack is None:
        raise ValueError("generative AT needs cfg.attack")
    C = train.clips.shape[-1]
    model = model or ClassifierF(train.num_classes, cfg.widths, C, seed=cfg.seed)
    G = G or GeneratorG(C, gan_cfg.widths_g, seed=cfg.seed, refine=gan_cfg.refine)
    D = D or DiscriminatorD(C, gan_cfg.widths_d, seed=cfg.seed)
    composite = Composite(G, model)
    g_opt, d_opt = _adam(G.parameters(), gan_cfg), _adam(D.parameters(), gan_cfg)

    def joint_loss(x, x_adv, y):
        d_loss = _d_step(G, D, d_opt, x, x_adv, gan_cfg) if gan_cfg.gamma2 and gan_cfg.d_steps else 0.0
        g_obj, mse, out = _g_terms(G, D, x, x_adv, gan_cfg)
        logits = model(out)
        ce = cross_entropy(logits, y)
        return ce + g_obj, logits, {"d_loss": d_loss, "mse": float(mse.data), "ce": float(ce.data)}

    state = fit_classifier(cfg, train, val, model, attack_target=composite, forward=composite,
                           train_loss=joint_loss, extra_optimizers=(g_opt,))
    state.extra_models.update(G=G, D=D)
    return state
