import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tpurify import nn
from tpurify.attacks import AttackSpec, fgsm, pgd, sign
from tpurify.data import make_synthetic_blobs
from tpurify.nn import cross_entropy, forward_logits
from tpurify.rng import derive
from tpurify.training import TrainSpec, adversarial_train

# one float32 ulp at the top of the pixel range; the budget bound is
# epsilon plus this, which is the tightest bound float32 arithmetic allows
ULP1 = float(np.spacing(np.float32(1.0)))


def tiny_model(seed=0):
    return nn.mlp((1, 2, 4), 3, hidden=(8,), seed=seed)


def tiny_batch(seed=0, n=6, shape=(1, 2, 4)):
    rng = np.random.default_rng(seed)
    return rng.random((n,) + shape).astype(np.float32), rng.integers(0, 3, size=n)


class TestSign:
    def test_definition(self):
        np.testing.assert_array_equal(sign(np.array([-3.0, 0.0, 0.5])), [-1.0, 0.0, 1.0])

    def test_zero_tensor(self):
        np.testing.assert_array_equal(sign(np.zeros((2, 3))), np.zeros((2, 3)))

    def test_idempotent(self):
        x = np.random.default_rng(0).normal(size=(4, 4)).astype(np.float32)
        np.testing.assert_array_equal(sign(sign(x)), sign(x))


class TestAttackSpec:
    def test_fgsm_defaults(self):
        spec = AttackSpec.fgsm_spec(8 / 255)
        assert spec.steps == 1 and spec.alpha == spec.epsilon and not spec.random_init

    def test_fgsm_multi_step_rejected(self):
        with pytest.raises(ValueError, match="single-step"):
            AttackSpec(kind="fgsm", epsilon=0.1, steps=3)

    def test_fgsm_alpha_must_equal_epsilon(self):
        with pytest.raises(ValueError, match="alpha"):
            AttackSpec(kind="fgsm", epsilon=0.1, alpha=0.05)

    def test_bad_epsilon(self):
        with pytest.raises(ValueError, match="epsilon"):
            AttackSpec(kind="fgsm", epsilon=-0.1)
        with pytest.raises(ValueError, match="epsilon"):
            AttackSpec(kind="pgd", epsilon=1.5)

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="kind"):
            AttackSpec(kind="bim", epsilon=0.1)

    def test_pgd_defaults(self):
        spec = AttackSpec.pgd_spec(8 / 255)
        assert spec.steps == 20 and spec.random_init and spec.alpha == pytest.approx(2 / 255)


class TestFgsm:
    def test_zero_epsilon_bitwise_identity(self):
        m = tiny_model()
        x, y = tiny_batch()
        out = fgsm(m, x, y, AttackSpec.fgsm_spec(0.0))
        assert out.tobytes() == x.tobytes()

    def test_linear_model_matches_analytic_direction(self):
        rng = np.random.default_rng(4)
        W = rng.normal(size=(8, 3)).astype(np.float32)
        m = nn.Model.build([{"kind": "flatten"}, {"kind": "linear", "out": 3}], (1, 2, 4), 3, seed=0)
        m.params["l1.w"].data = W
        m.params["l1.b"].data[:] = 0.0
        x, y = tiny_batch(1, n=5)
        eps = 8 / 255
        out = fgsm(m, x, y, AttackSpec.fgsm_spec(eps))

        z = x.reshape(5, 8).astype(np.float64) @ W.astype(np.float64)
        soft = np.exp(z) / np.exp(z).sum(1, keepdims=True)
        soft[np.arange(5), y] -= 1.0
        g = (soft @ W.T.astype(np.float64)).reshape(x.shape) / 5.0
        want = np.clip(x + np.float32(eps) * np.sign(g).astype(np.float32), 0.0, 1.0)
        np.testing.assert_allclose(out, want, atol=2 * ULP1)

    def test_budget_and_range(self):
        m = tiny_model(2)
        x, y = tiny_batch(2, n=64)
        eps = 8 / 255
        out = fgsm(m, x, y, AttackSpec.fgsm_spec(eps))
        assert np.abs(out - x).max() <= eps + ULP1
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_does_not_mutate_model_or_batch(self):
        m = tiny_model(3)
        x, y = tiny_batch(3)
        fp, xb = m.fingerprint(), x.tobytes()
        fgsm(m, x, y, AttackSpec.fgsm_spec(8 / 255))
        assert m.fingerprint() == fp and x.tobytes() == xb

    def test_wrong_spec_kind(self):
        m = tiny_model()
        x, y = tiny_batch()
        with pytest.raises(ValueError, match="fgsm called"):
            fgsm(m, x, y, AttackSpec.pgd_spec(0.1))


class TestPgd:
    def test_zero_epsilon_identity(self):
        m = tiny_model()
        x, y = tiny_batch()
        out = pgd(m, x, y, AttackSpec.pgd_spec(0.0, random_init=False))
        assert out.tobytes() == x.tobytes()

    def test_single_step_no_init_equals_fgsm_bitwise(self):
        m = tiny_model(5)
        x, y = tiny_batch(5, n=32)
        eps = 8 / 255
        a = fgsm(m, x, y, AttackSpec.fgsm_spec(eps))
        b = pgd(m, x, y, AttackSpec(kind="pgd", epsilon=eps, alpha=eps, steps=1, random_init=False))
        assert a.tobytes() == b.tobytes()

    def test_budget_holds_after_every_iterate(self):
        # same seed reproduces the same trajectory, so running k = 1..5
        # steps observes every intermediate iterate
        m = tiny_model(6)
        x, y = tiny_batch(6, n=16)
        eps, alpha = 8 / 255, 2 / 255
        for k in range(1, 6):
            spec = AttackSpec(kind="pgd", epsilon=eps, alpha=alpha, steps=k, random_init=True)
            out = pgd(m, x, y, spec, rng=derive(0, "pgd-test"))
            assert np.abs(out - x).max() <= eps + ULP1, f"budget violated at iterate {k}"
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_random_init_needs_rng(self):
        m = tiny_model()
        x, y = tiny_batch()
        with pytest.raises(ValueError, match="rng"):
            pgd(m, x, y, AttackSpec.pgd_spec(0.1), rng=None)

    def test_does_not_mutate_model(self):
        m = tiny_model(7)
        x, y = tiny_batch(7)
        fp = m.fingerprint()
        pgd(m, x, y, AttackSpec.pgd_spec(8 / 255, steps=3), rng=derive(1, "t"))
        assert m.fingerprint() == fp


class TestProperties:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1), st.floats(0.0, 0.2), st.booleans())
    def test_budget_and_range_random(self, seed, eps, use_pgd):
        m = tiny_model(seed % 17)
        x, y = tiny_batch(seed, n=8)
        if use_pgd:
            spec = AttackSpec.pgd_spec(eps, steps=3)
            out = pgd(m, x, y, spec, rng=derive(seed, "h"))
        else:
            spec = AttackSpec.fgsm_spec(eps)
            out = fgsm(m, x, y, spec)
        assert np.abs(out - x).max() <= eps + ULP1
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_fgsm_raises_loss_on_trained_model(self):
        # statistical check: after training, the attack direction increases
        # the mean cross-entropy on a large sample
        train = make_synthetic_blobs(2, 600, 8, 4.0, seed=0)
        test = make_synthetic_blobs(2, 600, 8, 4.0, seed=1)
        model = nn.mlp(train.input_shape, 2, hidden=(16,), seed=0)
        spec = TrainSpec(epochs=3, batch_size=64, lr0=0.05, lr_drops=(), momentum=0.9,
                         weight_decay=0.0, attack=None, seed=0, eval_every=3, eval_max=200)
        adversarial_train(model, train, test, spec)
        x, y = test.images[:1000], test.labels[:1000]
        adv = fgsm(model, x, y, AttackSpec.fgsm_spec(0.05))
        clean_loss = cross_entropy(forward_logits(model, x), y).item()
        adv_loss = cross_entropy(forward_logits(model, adv), y).item()
        assert adv_loss >= clean_loss
