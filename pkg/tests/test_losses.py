"""Training objectives: frozen analytic values, oracles, and FD gradients."""

import math

import numpy as np
import pytest

from ucdmt import autodiff as ad
from ucdmt import losses as L
from ucdmt.errors import InvalidCode, ShapeMismatch
from tests.test_autodiff import fd_gradcheck


def test_translation_l1_values():
    a = np.full((4, 4), 0.5)
    b = np.zeros((4, 4))
    assert L.translation_l1(a, a) == 0.0
    assert L.translation_l1(a, b) == pytest.approx(0.5)
    rng = np.random.default_rng(0)
    x, y = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    brute = sum(abs(x[i, j] - y[i, j]) for i in range(8) for j in range(8)) / 64
    assert L.translation_l1(x, y) == pytest.approx(brute, abs=1e-7)


def test_translation_l1_symmetric_and_shape_checked():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
    assert L.translation_l1(a, b) == L.translation_l1(b, a)
    with pytest.raises(ShapeMismatch):
        L.translation_l1(a, b[:3])


def test_cycle_loss_matches_translation_l1_bitwise():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((6, 6)), rng.standard_normal((6, 6))
    assert L.cycle_reconstruction_loss(a, b) == L.translation_l1(a, b)
    assert L.cycle_reconstruction_loss(np.full((3, 3), -1.0),
                                       np.full((3, 3), 1.0)) == pytest.approx(2.0)
    # identity-map stub autoencoder: cycled output equals the input exactly
    assert L.cycle_reconstruction_loss(a, a) == 0.0


def test_disentanglement_loss_values():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((4, 8, 8))
    assert L.disentanglement_loss(z, z) == 0.0
    assert L.disentanglement_loss(z + 0.1, z) == pytest.approx(0.1, abs=1e-9)
    z2 = rng.standard_normal((4, 8, 8))
    brute = np.abs(z - z2).sum() / z.size
    assert L.disentanglement_loss(z, z2) == pytest.approx(brute, abs=1e-7)


def test_adversarial_d_values():
    zeros = np.zeros((3, 3))
    assert L.adversarial_loss_d(zeros, zeros) == pytest.approx(2 * math.log(2), abs=1e-6)
    # perfect discriminator limit: large real scores, very negative fake scores
    big = np.full((3, 3), 50.0)
    assert L.adversarial_loss_d(big, -big) == pytest.approx(0.0, abs=1e-12)
    assert L.adversarial_loss_d(zeros, zeros) >= 0.0


def test_adversarial_g_values():
    zeros = np.zeros((2, 2))
    assert L.adversarial_loss_g(zeros) == pytest.approx(math.log(2), abs=1e-9)
    big = np.full((2, 2), 40.0)
    assert L.adversarial_loss_g(big) == pytest.approx(0.0, abs=1e-12)
    # minimax mode: mean log(1 - sigmoid(fake))
    assert L.adversarial_loss_g(zeros, "minimax") == pytest.approx(-math.log(2), abs=1e-9)
    with pytest.raises(ValueError):
        L.adversarial_loss_g(zeros, "wasserstein")


def test_minimax_and_nonsaturating_gradients_share_sign():
    rng = np.random.default_rng(4)
    for _ in range(20):
        s = ad.Tensor(rng.standard_normal((3, 3)) * 3, requires_grad=True)
        L.adversarial_loss_g(s, "nonsaturating").backward()
        g_ns = s.grad.copy()
        s.grad = None
        L.adversarial_loss_g(s, "minimax").backward()
        g_mm = s.grad
        assert np.all(np.sign(g_ns) == np.sign(g_mm))
        assert np.all(g_ns < 0) and np.all(g_mm < 0)  # both push scores up


def test_modality_classification_values():
    uniform = np.zeros(4)
    onehot = np.array([0, 1, 0, 0])
    assert L.modality_classification_loss(uniform, onehot) == pytest.approx(
        math.log(4), abs=1e-6)
    confident = np.array([0.0, 30.0, 0.0, 0.0])
    assert L.modality_classification_loss(confident, onehot) == pytest.approx(0.0, abs=1e-9)
    rng = np.random.default_rng(5)
    logits = rng.standard_normal(4)
    shifted = logits + 123.4
    assert L.modality_classification_loss(logits, onehot) == pytest.approx(
        L.modality_classification_loss(shifted, onehot), abs=1e-6)
    with pytest.raises(InvalidCode):
        L.modality_classification_loss(uniform, np.array([0.5, 0.5, 0, 0]))


def test_generator_objective_paper_weights():
    w = L.LossWeights()  # alpha 1, beta 0.5, lambda1 1, w_disen 1
    total, br = L.generator_objective(1.0, 1.0, 1.0, 1.0, 1.0, w)
    assert total == pytest.approx(4.5)
    assert br.total == pytest.approx(4.5)
    total0, _ = L.generator_objective(0.0, 0.0, 0.0, 0.0, 0.0, w)
    assert total0 == 0.0


def test_generator_objective_ablation_switch():
    w = L.LossWeights()
    total_on, br_on = L.generator_objective(1.0, 1.0, 1.0, 1.0, 0.7, w)
    total_off, br_off = L.generator_objective(1.0, 1.0, 1.0, 1.0, 0.7, w, disen_off=True)
    assert total_on - total_off == pytest.approx(0.7)
    assert br_off.disen == pytest.approx(0.7)  # reported even when excluded
    # zero weight is bitwise identical to the off switch
    w0 = L.LossWeights(w_disen=0.0)
    t0, _ = L.generator_objective(1.0, 1.0, 1.0, 1.0, 0.7, w0)
    assert t0 == total_off


def test_doubling_alpha_doubles_cycle_contribution_exactly():
    w1 = L.LossWeights(alpha=1.0)
    w2 = L.LossWeights(alpha=2.0)
    cyc = 0.3137
    t1, _ = L.generator_objective(0.0, cyc, 0.0, 0.0, 0.0, w1, disen_off=True)
    t2, _ = L.generator_objective(0.0, cyc, 0.0, 0.0, 0.0, w2, disen_off=True)
    assert t2 == 2.0 * t1


def test_discriminator_objective_paper_values():
    w = L.LossWeights()
    assert L.discriminator_objective(1.3863, 1.3863, w) == pytest.approx(2.7726)
    assert L.discriminator_objective(1.3863, 5.0, L.LossWeights(lambda2=0.0)) == \
        pytest.approx(1.3863)


def test_breakdown_total_consistency():
    rng = np.random.default_rng(6)
    w = L.LossWeights(alpha=0.7, beta=0.3, lambda1=1.2, lambda2=1.0, w_disen=0.4)
    vals = rng.uniform(0, 2, 5)
    total, br = L.generator_objective(*vals, w)
    expect = (vals[0] + w.alpha * vals[1] + w.beta * vals[2]
              + w.lambda1 * vals[3] + w.w_disen * vals[4])
    assert abs(br.total - expect) <= 1e-6 * max(1.0, abs(expect))
    assert total == br.total  # bit-reproducible given the same parts


def test_weights_validation():
    with pytest.raises(ValueError):
        L.LossWeights(alpha=-1).validate()
    L.LossWeights().validate()


@pytest.mark.parametrize("loss_fn", [
    lambda a, b: L.translation_l1(a, b),
    lambda a, b: L.cycle_reconstruction_loss(a, b),
    lambda a, b: L.disentanglement_loss(a, b),
])
def test_l1_family_gradients(loss_fn):
    rng = np.random.default_rng(7)
    a = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    # keep |a - b| away from the kink
    b = ad.Tensor(a.data + np.sign(rng.standard_normal((4, 4))) * rng.uniform(0.5, 1.5, (4, 4)),
                  requires_grad=True)
    fd_gradcheck(loss_fn, [a, b])


def test_adversarial_gradients():
    rng = np.random.default_rng(8)
    real = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    fake = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    fd_gradcheck(lambda r, f: L.adversarial_loss_d(r, f), [real, fake])
    fake2 = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    fd_gradcheck(lambda f: L.adversarial_loss_g(f), [fake2])
    fake3 = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    fd_gradcheck(lambda f: L.adversarial_loss_g(f, "minimax"), [fake3])


def test_mc_gradient():
    rng = np.random.default_rng(9)
    logits = ad.Tensor(rng.standard_normal((4, 4)), requires_grad=True)
    targets = np.array([0, 1, 2, 3])
    fd_gradcheck(lambda l: L.modality_classification_loss(l, targets), [logits])


def test_all_losses_nonnegative_and_finite():
    rng = np.random.default_rng(10)
    for _ in range(50):
        a, b = rng.standard_normal((5, 5)), rng.standard_normal((5, 5))
        for v in (L.translation_l1(a, b), L.cycle_reconstruction_loss(a, b),
                  L.disentanglement_loss(a, b), L.adversarial_loss_d(a, b),
                  L.adversarial_loss_g(a),
                  L.modality_classification_loss(rng.standard_normal(4),
                                                 np.eye(4)[rng.integers(4)])):
            assert v >= 0.0 and math.isfinite(v)
