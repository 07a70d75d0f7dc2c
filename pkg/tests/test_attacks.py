import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import vidadv.tensor as T
from vidadv.attacks import (
    VARIANTS, AttackSpec, LossSurface, PerturbationSupport, border_thickness, budget, evaluate, fgsm,
    fit_alpha_vs_eps, flicker_attack, flicker_regularizers, frame_border_attack, frame_saliency_iterative,
    frame_saliency_oneshot, input_gradient, is_feasible, linear_step_size, loss_surface, masked_pgd,
    optimal_alpha, patch_support, pgd_linf, project_linf, read_surface_tsv, run_attack, saliency_scores,
    write_alpha_fit_tsv, write_surface_tsv,
)
from vidadv.models import ClassifierF, Model
from vidadv.rng import Rng
from vidadv.tensor import Tensor


class LinearScore(Model):
    """Two classes: logits ``[0, <w, x>]``; the input gradient of CE for label 0 has the sign of ``w``."""

    def __init__(self, w: np.ndarray):
        super().__init__()
        self.w = self.add_param("w", np.asarray(w, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        s = T.tsum(x * self.w, axis=(1, 2, 3, 4))
        s = T.reshape(s, (x.shape[0], 1))
        return T.concat([s * 0.0, s], axis=1)


class ConstantLogits(Model):
    def __init__(self, k: int = 3):
        super().__init__()
        self.b = self.add_param("b", np.arange(k, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        return T.reshape(T.tsum(x, axis=(1, 2, 3, 4)) * 0.0, (x.shape[0], 1)) + self.b


class FrameSum(Model):
    """Symmetric in frames: score is a squared sum over all pixels."""

    def __init__(self):
        super().__init__()
        self.w = self.add_param("w", np.ones(1, dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        s = T.reshape(T.tsum(x * x, axis=(1, 2, 3, 4)), (x.shape[0], 1)) * self.w
        return T.concat([s * 0.0, s], axis=1)


def assert_feasible(res, x, eps):
    d = res.delta
    assert d.dtype == np.float32 and d.shape == x.shape
    assert np.all(np.abs(d) <= budget(eps))
    adv = x + d
    assert adv.min() >= 0 and adv.max() <= 1
    m = np.broadcast_to(res.support.mask(x.shape), x.shape)
    assert not np.any(d[m == 0])


class TestProjection:
    def test_clamps_to_ball(self):
        x = np.full(3, 0.5, np.float32)
        d = project_linf(np.array([3, -10, 5], np.float32) / 255, 4, x)
        np.testing.assert_array_equal(d, np.array([3, -4, 4], np.float32) / np.float32(255))

    def test_in_ball_is_unchanged(self):
        x = np.full(3, 0.5, np.float32)
        d = np.array([1, -2, 0.5], np.float32) / 255
        assert np.array_equal(project_linf(d, 4, x), d)

    def test_range_clamp_at_white_pixel(self):
        x = np.array([1.0, 0.0], np.float32)
        d = project_linf(np.array([3, -3], np.float32) / 255, 8, x)
        assert np.array_equal(x + d, np.array([1.0, 0.0], np.float32))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0, 40))
    def test_idempotent_and_feasible(self, seed, eps):
        g = np.random.default_rng(seed)
        x = g.random(50).astype(np.float32)
        d = project_linf((g.normal(size=50) * 0.2).astype(np.float32), eps, x)
        assert np.array_equal(project_linf(d, eps, x), d)
        assert is_feasible(d, x, eps)


class TestFgsm:
    def test_sign_pattern(self):
        model = LinearScore(np.array([1.0, -1.0, 0.0]).reshape(1, 1, 1, 3, 1))
        x = np.full((1, 1, 1, 3, 1), 0.5, np.float32)
        res = fgsm(model, x, [0], 2)
        np.testing.assert_array_equal(res.delta.ravel(), np.array([2, -2, 0], np.float32) / np.float32(255))

    def test_zero_budget_is_noop(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = fgsm(tiny_model, x, y, 0)
        assert not res.delta.any() and res.loss_trace[0] == res.loss_trace[-1]

    def test_first_order_loss_increase(self):
        ups = 0
        for s in range(200):
            g = np.random.default_rng(s)
            m = ClassifierF(3, (2, 2, 2), seed=s)
            x = (g.random((1, 8, 8, 8, 3)) * 0.9 + 0.05).astype(np.float32)
            y = np.array([s % 3])
            res = fgsm(m, x, y, 1.0)
            ups += res.loss_trace[-1] >= res.loss_trace[0]
        assert ups >= 190

    def test_oneshot_saliency_equals_fgsm(self, tiny_model, clip_batch):
        x, y = clip_batch
        assert np.array_equal(frame_saliency_oneshot(tiny_model, x, y, 4).delta, fgsm(tiny_model, x, y, 4).delta)

    def test_success_means_prediction_differs_from_label(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = fgsm(tiny_model, x, y, 16)
        pred = evaluate(tiny_model, x + res.delta, y)[1].argmax(1)
        assert np.array_equal(res.success, pred != y)


class TestPgd:
    def test_zero_steps(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 2, 0))
        assert not res.delta.any() and res.steps_used == 0

    def test_zero_alpha_keeps_initialisation(self, tiny_model, clip_batch):
        x, y = clip_batch
        assert not pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 0, 4)).delta.any()
        spec = AttackSpec("pgd", 8, 0, 3, random_start=True)
        d0 = pgd_linf(tiny_model, x, y, spec.with_(steps=0), Rng(1, "a")).delta
        d3 = pgd_linf(tiny_model, x, y, spec, Rng(1, "a")).delta
        assert d0.any() and np.array_equal(d0, d3)

    def test_zero_gradient_leaves_delta_fixed(self, clip_batch):
        x, y = clip_batch
        res = pgd_linf(ConstantLogits(), x, np.zeros(len(y), int), AttackSpec("pgd", 8, 2, 3))
        assert not res.delta.any()

    def test_track_best_never_below_start(self, tiny_model, clip_batch):
        x, y = clip_batch
        clean = evaluate(tiny_model, x, y)[0]
        res = pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 40, 4, track_best=True))
        assert np.all(res.final_loss >= clean - 1e-6)
        np.testing.assert_allclose(evaluate(tiny_model, x + res.delta, y)[0], res.final_loss, rtol=1e-5)

    def test_trace_length(self, tiny_model, clip_batch):
        x, y = clip_batch
        assert len(pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 2, 3)).loss_trace) == 4

    def test_clips_attacked_independently(self, tiny_model, clip_batch):
        x, y = clip_batch
        spec = AttackSpec("pgd", 8, 2, 3)
        both = pgd_linf(tiny_model, x[:2], y[:2], spec).delta
        one = pgd_linf(tiny_model, x[:1], y[:1], spec).delta
        np.testing.assert_array_equal(both[:1], one)

    def test_random_start_needs_rng(self, tiny_model, clip_batch):
        x, y = clip_batch
        with pytest.raises(ValueError, match="rng"):
            pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 2, 1, random_start=True))

    @pytest.mark.parametrize("kw", [{"eps": -1}, {"alpha": -1}, {"steps": -1}, {"ratio": 0}, {"ratio": 1.5},
                                    {"lam": -1}, {"beta1": -0.1}, {"variant": "deepfool"}])
    def test_spec_validation(self, kw):
        with pytest.raises(ValueError):
            AttackSpec(**kw)

    def test_input_gradient_is_sum_of_per_clip_losses(self, tiny_model, clip_batch):
        x, y = clip_batch
        per, g, _ = input_gradient(tiny_model, x[:3], y[:3])
        _, g0, _ = input_gradient(tiny_model, x[:1], y[:1])
        np.testing.assert_allclose(g[:1], g0, rtol=1e-4, atol=1e-8)


class TestSupports:
    def test_patch_size(self):
        sup = patch_support((2, 4, 32, 32, 3), 0.25, Rng(0, "p"))
        assert (sup.height, sup.width) == (16, 16)
        m = sup.mask((2, 4, 32, 32, 3))
        assert m.shape == (2, 1, 32, 32, 1) and np.all(m.sum(axis=(1, 2, 3, 4)) == 256)

    def test_empty_patch(self):
        with pytest.raises(ValueError, match="empty"):
            patch_support((1, 1, 8, 8, 3), 0.001, Rng(0, "p"))

    def test_patch_outside_frame(self):
        sup = PerturbationSupport("patch", tops=np.array([6]), lefts=np.array([0]), height=4, width=4)
        with pytest.raises(ValueError, match="outside"):
            sup.mask((1, 1, 8, 8, 1))

    def test_masked_pgd_is_zero_off_patch(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = masked_pgd(tiny_model, x, y, 16, 4, 2, 0.25, Rng(2, "m"))
        assert_feasible(res, x, 16)
        for b in range(len(y)):
            t, l = res.support.tops[b], res.support.lefts[b]
            inside = np.zeros(x.shape[1:], bool)
            inside[:, t:t + 4, l:l + 4] = True
            assert not res.delta[b][~inside].any() and res.delta[b][inside].any()

    def test_full_ratio_patch_equals_pgd(self, tiny_model, clip_batch):
        x, y = clip_batch
        a = masked_pgd(tiny_model, x, y, 8, 2, 3, 1.0, Rng(2, "m"))
        b = pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 2, 3))
        assert np.array_equal(a.delta, b.delta)

    @pytest.mark.parametrize("r", [0.15, 0.3, 0.5, 0.9])
    def test_border_thickness_enumeration(self, r):
        H = W = 32
        counts = {b: 2 * b * (H + W) - 4 * b * b for b in range(1, 17)}
        best = min(counts, key=lambda b: (abs(counts[b] - r * H * W), b))
        assert border_thickness(H, W, r) == best

    def test_border_thickness_examples(self):
        assert border_thickness(32, 32, 0.15) == 1
        assert border_thickness(32, 32, 1e-9) == 1
        assert border_thickness(32, 32, 1.0) == 16

    def test_border_interior_is_zero(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = frame_border_attack(tiny_model, x, y, 255, 64, 2, 0.3)
        b = res.support.thickness
        assert_feasible(res, x, 255)
        assert not res.delta[:, :, b:-b, b:-b].any()

    def test_thick_border_equals_pgd(self, tiny_model, clip_batch):
        x, y = clip_batch
        a = frame_border_attack(tiny_model, x, y, 8, 2, 3, 1.0)
        assert a.support.thickness * 2 >= x.shape[2]
        b = pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 2, 3))
        assert np.array_equal(a.delta, b.delta)


class TestSaliency:
    def test_constant_model_scores_zero(self, clip_batch):
        x, y = clip_batch
        assert not saliency_scores(ConstantLogits(), x, np.zeros(len(y), int)).any()

    def test_duplicated_frame_scores_match(self, rng):
        x = rng.random((1, 4, 4, 4, 1)).astype(np.float32)
        x[0, 3] = x[0, 1]
        s = saliency_scores(FrameSum(), x, [0])[0]
        assert s[1] == pytest.approx(s[3], rel=1e-6)

    def test_matches_loop_oracle(self, tiny_model, clip_batch):
        x, y = clip_batch
        s = saliency_scores(tiny_model, x[:2], y[:2])
        for b in range(2):
            _, g, _ = input_gradient(tiny_model, x[b:b + 1], y[b:b + 1])
            for t in range(x.shape[1]):
                assert s[b, t] == pytest.approx(float(np.abs(g[0, t].astype(np.float64)).sum()), rel=1e-4)

    def test_iterative_skips_misclassified(self, tiny_model, clip_batch):
        x, y = clip_batch
        pred = evaluate(tiny_model, x, y)[1].argmax(1)
        wrong = (pred + 1) % 4
        res = frame_saliency_iterative(tiny_model, x, wrong, 8, 2, 2)
        assert res.frames_perturbed == [[] for _ in range(len(y))] or not res.delta.any()
        assert not res.delta.any()

    def test_iterative_perturbs_a_saliency_prefix(self, tiny_model, clip_batch):
        x, y = clip_batch
        pred = evaluate(tiny_model, x, y)[1].argmax(1)
        res = frame_saliency_iterative(tiny_model, x, pred, 2, 0.102, 2)
        order = np.argsort(-saliency_scores(tiny_model, x, pred), axis=1, kind="stable")
        assert_feasible(res, x, 2)
        for b, frames in enumerate(res.frames_perturbed):
            assert frames == order[b, :len(frames)].tolist()
            untouched = [t for t in range(x.shape[1]) if t not in frames]
            assert not res.delta[b, untouched].any()

    def test_iterative_needs_a_step(self, tiny_model, clip_batch):
        with pytest.raises(ValueError):
            frame_saliency_iterative(tiny_model, *clip_batch, 8, 2, 0)


class TestFlicker:
    def test_offsets_are_spatially_constant(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = flicker_attack(tiny_model, x, y, steps=5, step=5.0)
        assert_feasible(res, x, 255)
        d = res.delta
        assert np.array_equal(d, np.broadcast_to(d[:, :, :1, :1, :], d.shape))
        assert res.support.mode == "flicker"

    def test_offsets_respect_budget(self, tiny_model, clip_batch):
        x, y = clip_batch
        res = flicker_attack(tiny_model, x, y, steps=5, step=50.0, eps=4)
        assert_feasible(res, x, 4)

    def test_regularizers(self):
        u = Tensor(np.array([[[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]]]))
        thick, rough = flicker_regularizers(u)
        assert thick.data[0] == pytest.approx(2.5) and rough.data[0] == 0.0
        u2 = Tensor(np.array([[[0.0], [3.0]]]))
        assert flicker_regularizers(u2)[1].data[0] == pytest.approx(9.0)

    def test_hundred_step_configuration_runs(self, tiny_model, clip_batch):
        x, y = clip_batch
        spec = AttackSpec("flicker", eps=255, alpha=5.0, steps=100, beta1=0.1, beta2=0.9, margin=0.05)
        res = run_attack(tiny_model, x[:2], y[:2], spec)
        assert len(res.loss_trace) == 100 and np.all(np.isfinite(res.loss_trace))


class TestSurface:
    @pytest.fixture
    def surface(self, tiny_model, clip_batch):
        x, y = clip_batch
        return loss_surface(tiny_model, x, y, 8, [0, 1, 4], [0, 1, 3])

    def test_dims_and_finite(self, surface):
        assert surface.losses.shape == (3, 3) and np.all(np.isfinite(surface.losses))

    def test_zero_alpha_and_zero_steps_give_clean_loss(self, surface, tiny_model, clip_batch):
        clean = evaluate(tiny_model, *clip_batch)[0].mean()
        np.testing.assert_allclose(surface.losses[0], clean, rtol=1e-6)
        np.testing.assert_allclose(surface.losses[:, 0], clean, rtol=1e-6)

    def test_matches_pgd(self, surface, tiny_model, clip_batch):
        x, y = clip_batch
        res = pgd_linf(tiny_model, x, y, AttackSpec("pgd", 8, 4, 3))
        assert surface.losses[2, 2] == pytest.approx(res.loss_trace[-1], rel=1e-6)

    def test_empty_grid(self, tiny_model, clip_batch):
        with pytest.raises(ValueError):
            loss_surface(tiny_model, *clip_batch, 8, [], [1])

    def test_optimal_alpha_rules(self):
        one = LossSurface(np.array([3.0]), np.array([1, 5]), np.array([[0.1, 0.4]]), 8)
        assert optimal_alpha(one) == 3.0
        tie = LossSurface(np.array([1.0, 2.0, 3.0]), np.array([5]), np.array([[0.2], [0.7], [0.7]]), 8)
        assert optimal_alpha(tie) == 2.0

    def test_tsv_round_trip(self, surface, tmp_path):
        write_surface_tsv(surface, tmp_path / "s.tsv")
        back = read_surface_tsv(tmp_path / "s.tsv", 8)
        np.testing.assert_allclose(back.losses, surface.losses, rtol=1e-5)
        assert np.array_equal(back.steps, surface.steps)

    def test_alpha_fit_file(self, tmp_path):
        write_alpha_fit_tsv([(2, 0.5), (4, 1.0)], tmp_path / "f.tsv")
        assert (tmp_path / "f.tsv").read_text() == "eps\talpha_hat\n2\t0.5\n4\t1\n"


class TestFit:
    def test_two_reference_points(self):
        slope, intercept, r2 = fit_alpha_vs_eps([(4, 1.0), (8, 1.8)])
        assert slope == pytest.approx(0.2) and intercept == pytest.approx(0.2) and r2 == pytest.approx(1.0)
        assert linear_step_size(4) == pytest.approx(1.0) and linear_step_size(8) == pytest.approx(1.8)

    def test_collinear(self):
        assert fit_alpha_vs_eps([(e, 3 * e - 1) for e in (1, 2, 5, 9)])[2] == pytest.approx(1.0, abs=1e-9)

    def test_degenerate(self):
        with pytest.raises(ValueError, match="degenerate"):
            fit_alpha_vs_eps([(4, 1.0), (4, 2.0)])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(3, 12))
    def test_matches_closed_form(self, seed, n):
        g = np.random.default_rng(seed)
        pts = np.column_stack([g.uniform(0, 20, n), g.normal(size=n)])
        A = np.column_stack([pts[:, 0], np.ones(n)])
        coef, *_ = np.linalg.lstsq(A, pts[:, 1], rcond=None)
        slope, intercept, r2 = fit_alpha_vs_eps(pts)
        assert slope == pytest.approx(coef[0], abs=1e-9) and intercept == pytest.approx(coef[1], abs=1e-9)
        r2_oracle = 1 - np.sum((A @ coef - pts[:, 1]) ** 2) / np.sum((pts[:, 1] - pts[:, 1].mean()) ** 2)
        assert r2 == pytest.approx(r2_oracle, abs=1e-9)


_FEASIBILITY_SPECS = [
    AttackSpec("fgsm", 8),
    AttackSpec("fgsm", 8, frames=(0, 2)),
    AttackSpec("pgd", 8, 2, 3),
    AttackSpec("pgd", 4, 2, 2, random_start=True, track_best=True),
    AttackSpec("pgd", 8, 2, 2, frames=(1,)),
    AttackSpec("masked-pgd", 16, 4, 2, ratio=0.3),
    AttackSpec("frame-border", 255, 64, 2, ratio=0.2),
    AttackSpec("saliency-oneshot", 8),
    AttackSpec("saliency-iterative", 8, 2, 2),
    AttackSpec("flicker", 8, 5.0, 4),
]


def test_every_variant_is_covered():
    assert {s.variant for s in _FEASIBILITY_SPECS} == set(VARIANTS)


@pytest.mark.parametrize("spec", _FEASIBILITY_SPECS, ids=lambda s: f"{s.variant}-{s.eps:g}")
def test_variant_feasibility(spec, tiny_model, tiny_splits):
    ds = tiny_splits["train"]
    x, y = ds.clips[:8], ds.labels[:8]
    res = run_attack(tiny_model, x, y, spec, Rng(0, "feasibility"))
    assert_feasible(res, x, spec.eps)


def test_pgd_beats_fgsm_on_trained_model(benign_small):
    """Tuned 5-step PGD succeeds more often than FGSM at equal budget, averaged over 5 clip subsets."""
    model, splits = benign_small
    test = splits["test"]
    eps = 2.0
    gaps = []
    for s in range(5):
        idx = Rng(s, "subset").permutation(len(test))[:40]
        x, y = test.clips[idx], test.labels[idx]
        f = fgsm(model, x, y, eps).success_rate
        p = max(pgd_linf(model, x, y, AttackSpec("pgd", eps, a, 5)).success_rate for a in (0.25, 0.5, 1.0))
        gaps.append(p - f)
    assert np.mean(gaps) > 0
