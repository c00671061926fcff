import numpy as np
import pytest

from conftest import make_head_model
from engine.errors import ConfigError, DegenerateBatchWarning, InputDomainError
from engine.model import ClassifierModel, Dataset, forward_features
from engine.numerics import RngStream, minmax_normalize, softmax
from engine.unig import (
    UniGConfig,
    cascade_single_sample,
    clip_A,
    feature_gradients,
    grad_loss_wrt_A,
    init_A,
    unification_loss,
    unig_forward,
    unig_forward_features,
)


class TestSecondOrderGradient:
    @pytest.mark.parametrize("frozen_p", [False, True])
    def test_matches_central_differences(self, frozen_p):
        h = 1e-4
        checked = 0
        for trial in range(40):
            model = make_head_model(d=8, classes=5, seed=trial)
            rng = np.random.default_rng(100 + trial)
            f = rng.normal(0.0, 1.0, (4, 8))
            A = rng.normal(1.0, 0.3, (4, 8))
            _, cache = feature_gradients(model, f, A)
            if frozen_p:
                # p held at its value at A
                g0 = (cache.p - cache.c) @ model.head_W

                def g_hat(Ap):
                    return Ap * g0
            else:
                def g_hat(Ap):
                    return feature_gradients(model, f, Ap)[0]

            analytic = grad_loss_wrt_A(model, f, A, cache, frozen_p=frozen_p)
            _, lo0, hi0 = minmax_normalize(g_hat(A))
            numeric = np.zeros_like(A)
            tie = False
            for idx in np.ndindex(*A.shape):
                Ap, Am = A.copy(), A.copy()
                Ap[idx] += h
                Am[idx] -= h
                for At in (Ap, Am):
                    _, lo, hi = minmax_normalize(g_hat(At))
                    tie |= not (np.array_equal(lo, lo0) and np.array_equal(hi, hi0))
                numeric[idx] = (unification_loss(g_hat(Ap)) - unification_loss(g_hat(Am))) / (2 * h)
            if tie:
                continue
            rel = np.linalg.norm(numeric - analytic) / max(np.linalg.norm(numeric), 1e-12)
            assert rel <= 1e-4, f"trial {trial}: relative error {rel:.2e}"
            checked += 1
            if checked == 20:
                break
        assert checked == 20

    def test_single_row_has_zero_gradient(self, head_model):
        f = np.ones((1, 8))
        A = np.ones((1, 8))
        _, cache = feature_gradients(head_model, f, A)
        assert np.array_equal(grad_loss_wrt_A(head_model, f, A, cache), np.zeros((1, 8)))

    def test_identical_gradients_are_stationary(self, head_model):
        f = np.tile(np.linspace(-1.0, 1.0, 8), (5, 1))
        A = np.ones((5, 8))
        g_hat, cache = feature_gradients(head_model, f, A)
        assert unification_loss(g_hat) == 0.0
        assert np.array_equal(grad_loss_wrt_A(head_model, f, A, cache), np.zeros((5, 8)))

    def test_row_gradient_only_sees_adjacent_rows(self, head_model):
        rng = np.random.default_rng(8)
        f = rng.normal(0.0, 1.0, (7, 8))
        A = rng.normal(1.0, 0.3, (7, 8))
        moved = A.copy()
        moved[3] += rng.normal(0.0, 0.3, 8)

        def grad(At):
            _, cache = feature_gradients(head_model, f, At)
            return grad_loss_wrt_A(head_model, f, At, cache)

        before, after = grad(A), grad(moved)
        for row in (0, 1, 5, 6):
            assert np.allclose(before[row], after[row], atol=1e-12)
        assert not np.allclose(before[3], after[3])


class TestFeatureGradients:
    def test_two_class_example(self):
        model = ClassifierModel(layers=(), head_W=np.eye(2), head_b=np.zeros(2),
                                input_shape=(1, 1, 2))
        g_hat, cache = feature_gradients(model, np.array([[2.0, 0.0]]), np.ones((1, 2)))
        assert np.allclose(cache.p[0], [0.8808, 0.1192], atol=1e-4)
        assert np.array_equal(cache.c[0], [1.0, 0.0])
        assert np.allclose(g_hat[0], [-0.1192, 0.1192], atol=1e-4)

    def test_scaled_by_A(self, head_model):
        f = np.random.default_rng(2).normal(0.0, 1.0, (3, 8))
        A = np.full((3, 8), 1.2)
        g_hat, cache = feature_gradients(head_model, f, A)
        assert np.allclose(g_hat, 1.2 * cache.g)


class TestModuleParameter:
    @pytest.mark.parametrize("delta", [0.0, 0.1, 0.3, 0.5, 0.7])
    def test_clip_is_machine_exact(self, delta):
        A = RngStream(0).normal(1.0, 2.0, (64, 32))
        assert np.max(np.abs(clip_A(A, delta) - 1.0)) <= delta

    def test_init_distribution(self):
        A = init_A(200, 50, seed=1)
        assert abs(A.mean() - 1.0) < 0.02
        assert abs(A.std() - 0.5) < 0.02

    def test_init_accepts_stream(self):
        assert np.array_equal(init_A(3, 4, RngStream(2), 0.5), init_A(3, 4, 2, 0.5))

    def test_config_domain(self):
        with pytest.raises(InputDomainError):
            UniGConfig(delta=-0.1)
        with pytest.raises(InputDomainError):
            UniGConfig(p=0)
        with pytest.raises(InputDomainError):
            UniGConfig(alpha=-1.0)


class TestForward:
    @pytest.fixture
    def features(self):
        return np.random.default_rng(3).normal(0.0, 1.0, (16, 8))

    def test_delta_zero_is_vanilla(self, head_model, features):
        probs, state = unig_forward_features(head_model, features, UniGConfig(delta=0.0, p=3))
        assert np.allclose(probs, softmax(head_model.head(features)), atol=1e-6)
        assert state.forward_drift == 0.0

    def test_alpha_zero_keeps_initial_A(self, head_model, features):
        cfg = UniGConfig(delta=0.5, p=2, alpha=0.0, seed=9)
        _, state = unig_forward_features(head_model, features, cfg, RngStream(9))
        assert np.array_equal(state.A, init_A(16, 8, RngStream(9), 0.5))
        assert state.trace[0] == state.trace[-1]

    @pytest.mark.parametrize("delta", [0.1, 0.3, 0.5])
    def test_clip_invariant_after_forward(self, head_model, features, delta):
        _, state = unig_forward_features(head_model, features, UniGConfig(delta=delta, p=3, alpha=50.0))
        assert np.max(np.abs(state.A - 1.0)) <= delta

    def test_trace_has_p_plus_one_losses(self, head_model, features):
        _, state = unig_forward_features(head_model, features, UniGConfig(p=4))
        assert len(state.trace) == 5

    def test_small_step_descends(self, head_model, features):
        cfg = UniGConfig(delta=10.0, p=1, alpha=1e-4)
        _, state = unig_forward_features(head_model, features, cfg)
        assert state.trace[-1] < state.trace[0]

    def test_output_is_distribution(self, head_model, features):
        probs, state = unig_forward_features(head_model, features, UniGConfig())
        assert np.allclose(probs.sum(axis=1), 1.0)
        assert np.allclose(softmax(state.logits), probs)

    def test_seeded(self, head_model, features):
        a, _ = unig_forward_features(head_model, features, UniGConfig(seed=5))
        b, _ = unig_forward_features(head_model, features, UniGConfig(seed=5))
        assert np.array_equal(a, b)

    def test_fresh_A_per_seed_within_clip(self, head_model, features):
        cfg = UniGConfig(delta=0.3, p=2)
        _, s1 = unig_forward_features(head_model, features, cfg, RngStream(1))
        _, s2 = unig_forward_features(head_model, features, cfg, RngStream(2))
        assert not np.array_equal(s1.A, s2.A)
        for state in (s1, s2):
            assert np.max(np.abs(state.A - 1.0)) <= 0.3

    @pytest.mark.parametrize("delta", [0.1, 0.5])
    def test_feature_drift_bounded_by_delta(self, head_model, features, delta):
        _, state = unig_forward_features(head_model, features, UniGConfig(delta=delta, p=3, alpha=20.0))
        drift = np.max(np.abs(state.A * features - features))
        assert drift <= delta * np.max(np.abs(features)) + 1e-12

    def test_max_deviation_recorded_per_update(self, head_model, features):
        cfg = UniGConfig(delta=0.4, p=3, seed=6)
        _, state = unig_forward_features(head_model, features, cfg, RngStream(6))
        assert len(state.max_deviation) == 4
        assert state.max_deviation[0] == np.max(np.abs(init_A(16, 8, RngStream(6), 0.4) - 1.0))
        assert state.max_deviation[-1] == np.max(np.abs(state.A - 1.0))
        assert max(state.max_deviation) <= 0.4

    def test_single_image_warns_and_is_vanilla(self, head_model):
        f = np.ones((1, 8))
        with pytest.warns(DegenerateBatchWarning):
            probs, state = unig_forward_features(head_model, f, UniGConfig())
        assert state.degenerate
        assert np.allclose(probs, softmax(head_model.head(f)))

    def test_unig_forward_on_images(self, frozen_model, shapes8):
        probs, state = unig_forward(frozen_model, shapes8.images[:8], UniGConfig())
        assert probs.shape == (8, 3)
        assert state.A.shape == (8, frozen_model.d)


class TestLoss:
    def test_identical_rows_have_zero_loss(self):
        assert unification_loss(np.tile([0.1, 0.5, -0.2], (5, 1))) == 0.0

    def test_single_row_is_zero(self):
        assert unification_loss(np.array([[1.0, 2.0]])) == 0.0

    def test_adjacent_pairs(self):
        g = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        assert unification_loss(g) == pytest.approx(2.0)


class TestCascade:
    def test_single_sample_probs(self, frozen_model, shapes8):
        reservoir = shapes8.subset(np.arange(20))
        probs = cascade_single_sample(frozen_model, shapes8.images[30], reservoir,
                                      UniGConfig(cascade_k=10))
        assert probs.shape == (3,)
        assert probs.sum() == pytest.approx(1.0)

    def test_delta_zero_cascade_is_vanilla(self, frozen_model, shapes8):
        reservoir = shapes8.subset(np.arange(20))
        x = shapes8.images[30]
        probs = cascade_single_sample(frozen_model, x, reservoir, UniGConfig(delta=0.0, cascade_k=4))
        vanilla = softmax(frozen_model.head(forward_features(frozen_model, x[None])))[0]
        assert np.allclose(probs, vanilla, atol=1e-6)

    def test_reservoir_too_small(self, frozen_model, shapes8):
        reservoir = shapes8.subset(np.arange(3))
        with pytest.raises(ConfigError):
            cascade_single_sample(frozen_model, shapes8.images[30], reservoir,
                                  UniGConfig(cascade_k=10))

    def test_empty_reservoir(self, frozen_model, shapes8):
        empty = Dataset(np.zeros((0, 1, 8, 8)), np.zeros(0, dtype=np.int64), classes=3)
        with pytest.raises(ConfigError):
            cascade_single_sample(frozen_model, shapes8.images[0], empty, UniGConfig(cascade_k=1))
