"""Training objectives: translation L1, adversarial (both sides), modality
classification, cycle reconstruction, latent disentanglement, and the two
weighted composites.

Every loss accepts either autodiff Tensors (returns a scalar Tensor with
gradients) or plain numpy arrays (returns a float). The adversarial heads
take raw pre-sigmoid scores; the logistic is folded into the loss in
softplus form, which is the numerically stable formulation:

    -log sigmoid(s)       == softplus(-s)
    -log(1 - sigmoid(s))  == softplus(s)
"""

from dataclasses import dataclass

import numpy as np

from ucdmt import autodiff as ad
from ucdmt.errors import InvalidCode

GAN_MODES = ("nonsaturating", "minimax")


@dataclass
class LossWeights:
    """Composite-objective weights; paper operating point is the default."""
    alpha: float = 1.0     # cycle-reconstruction weight
    beta: float = 0.5      # generator adversarial weight
    lambda1: float = 1.0   # generator modality-classification weight
    lambda2: float = 1.0   # discriminator modality-classification weight
    w_disen: float = 1.0   # latent disentanglement weight

    def validate(self):
        for name in ("alpha", "beta", "lambda1", "lambda2", "w_disen"):
            if getattr(self, name) < 0:
                raise ValueError(f"weights.{name} must be >= 0")
        return self


@dataclass
class LossBreakdown:
    l1_translation: float
    l1_cycle: float
    adv: float
    mc: float
    disen: float
    total: float


def _value(x):
    return x.item() if isinstance(x, ad.Tensor) else float(x)


def _wrap2(a, b):
    """Promote to Tensors; remember whether the caller passed any Tensor."""
    tape = isinstance(a, ad.Tensor) or isinstance(b, ad.Tensor)
    return ad.as_tensor(a), ad.as_tensor(b), tape


def translation_l1(pred, target):
    """Mean absolute error between the translated image and its ground truth."""
    a, b, tape = _wrap2(pred, target)
    out = ad.mean_abs_diff(a, b)
    return out if tape else out.item()


def cycle_reconstruction_loss(cycled, original):
    """Mean absolute error after mapping the translation back to its source."""
    a, b, tape = _wrap2(cycled, original)
    out = ad.mean_abs_diff(a, b)
    return out if tape else out.item()


def disentanglement_loss(z_fake, z_real):
    """Mean absolute gap between the encodings of a translation and its input."""
    a, b, tape = _wrap2(z_fake, z_real)
    out = ad.mean_abs_diff(a, b)
    return out if tape else out.item()


def adversarial_loss_d(real_scores, fake_scores):
    """Discriminator logistic loss: real scored up, fake scored down."""
    r, f, tape = _wrap2(real_scores, fake_scores)
    out = ad.add(ad.mean_softplus(ad.neg(r)), ad.mean_softplus(f))
    return out if tape else out.item()


def adversarial_loss_g(fake_scores, mode="nonsaturating"):
    """Generator adversarial term.

    nonsaturating: -mean log sigmoid(fake), the standard strong-gradient form.
    minimax:       +mean log(1 - sigmoid(fake)), the literal min-max objective.
    Both decrease as the discriminator is fooled.
    """
    if mode not in GAN_MODES:
        raise ValueError(f"gan_mode must be one of {GAN_MODES}, got {mode!r}")
    f = ad.as_tensor(fake_scores)
    tape = isinstance(fake_scores, ad.Tensor)
    if mode == "nonsaturating":
        out = ad.mean_softplus(ad.neg(f))
    else:
        out = ad.neg(ad.mean_softplus(f))
    return out if tape else out.item()


def modality_classification_loss(logits, target):
    """Cross-entropy of M-way modality logits against the true modality.

    Accepts a single logit vector (M,) with a one-hot code or class index,
    or batched logits (N, M) with one-hot rows (N, M) or indices (N,).
    """
    tape = isinstance(logits, ad.Tensor)
    lt = ad.as_tensor(logits)
    if hasattr(target, "bits"):
        target = target.bits
    t = np.asarray(target)
    m = lt.data.shape[-1]
    if t.ndim >= 1 and t.shape[-1] == m and t.ndim == lt.data.ndim:
        _check_onehot(t)
        idx = np.argmax(t, axis=-1).reshape(-1)
    elif t.ndim == max(0, lt.data.ndim - 1):
        idx = np.asarray(t, dtype=np.int64).reshape(-1)
    else:
        raise InvalidCode(f"target shape {t.shape} does not match logits {lt.data.shape}")
    if lt.data.ndim == 1:
        lt = ad.reshape(lt, (1, m))
    out = ad.softmax_cross_entropy(lt, idx)
    return out if tape else out.item()


def _check_onehot(code):
    arr = np.asarray(code)
    if not (np.all(np.isin(arr, (0, 1))) and np.all(arr.sum(axis=-1) == 1)):
        raise InvalidCode(f"target must be one-hot, got {arr!r}")


def generator_objective(l1, cycle, adv, mc, disen, weights: LossWeights,
                        disen_off=False):
    """Weighted generator total; returns (total, LossBreakdown of floats).

    The disentanglement term is skipped entirely (not multiplied by zero)
    when disabled or zero-weighted, so the ablated graph is literally the
    full graph minus that op. Its value still appears in the breakdown.
    """
    total = (l1
             + weights.alpha * _pass(cycle)
             + weights.beta * _pass(adv)
             + weights.lambda1 * _pass(mc))
    if not disen_off and weights.w_disen != 0.0:
        total = total + weights.w_disen * _pass(disen)
    breakdown = LossBreakdown(
        l1_translation=_value(l1), l1_cycle=_value(cycle), adv=_value(adv),
        mc=_value(mc), disen=_value(disen), total=_value(total))
    return total, breakdown


def _pass(x):
    return x if isinstance(x, ad.Tensor) else float(x)


def discriminator_objective(adv_d, mc_real_fake, weights: LossWeights):
    """adv_d + lambda2 * mc; adv_d already carries the minimization sign."""
    return adv_d + weights.lambda2 * _pass(mc_real_fake)
