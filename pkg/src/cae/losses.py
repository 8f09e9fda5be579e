"""Reconstruction, adversarial and latent cycle losses and their weighted sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from . import tensor as T
from .errors import TrainingDivergenceError
from .model import cycle_map, decode_teacher_forced, encode

PROB_CLAMP = 1e-7
DEFAULT_LAMBDAS = (0.1, 1.0, 1.0)


@dataclass
class LossBreakdown:
    recon: float
    gen_adv_12: float
    gen_adv_21: float
    disc_1: float
    disc_2: float
    cycle: float
    total: float
    lambda1: float
    lambda2: float
    lambda3: float

    def as_dict(self):
        return asdict(self)

    def is_finite(self):
        return all(math.isfinite(v) for v in asdict(self).values())


def style_reconstruction_loss(ae, batch, z=None):
    """Per-token mean NLL of the teacher-forced reconstruction; padding is masked."""
    if z is None:
        z = encode(ae, batch)
    logits = decode_teacher_forced(ae, z, batch)
    b, steps, v = logits.shape
    return T.softmax_cross_entropy(T.reshape(logits, (b * steps, v)),
                                   batch.targets.reshape(-1),
                                   batch.target_mask.reshape(-1))


def reconstruction_loss(model, batch1, batch2, z1=None, z2=None):
    return (style_reconstruction_loss(model.ae1, batch1, z1)
            + style_reconstruction_loss(model.ae2, batch2, z2))


def _log_prob(p):
    return T.log(T.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def discriminator_terms(model, z1, z2, fake12=None, fake21=None):
    """Negated GAN value for each discriminator: real latents vs transferred ones.

    Transferred latents are detached so only discriminator weights get gradient.
    """
    z1, z2 = z1.detach(), z2.detach()
    fake12 = (model.t12(z1) if fake12 is None else fake12).detach()
    fake21 = (model.t21(z2) if fake21 is None else fake21).detach()
    disc2 = -(T.mean(_log_prob(model.d2(z2))) + T.mean(_log_prob(1.0 - model.d2(fake12))))
    disc1 = -(T.mean(_log_prob(model.d1(z1))) + T.mean(_log_prob(1.0 - model.d1(fake21))))
    return disc1, disc2


def generator_terms(model, z1, z2):
    """Non-saturating generator losses -log D(T(z)) for T12 (vs D2) and T21 (vs D1)."""
    z1, z2 = z1.detach(), z2.detach()
    gen12 = -T.mean(_log_prob(model.d2(model.t12(z1))))
    gen21 = -T.mean(_log_prob(model.d1(model.t21(z2))))
    return gen12, gen21


def adversarial_losses(model, z1, z2):
    """((gen12, gen21), (disc1, disc2)) on the given real latents."""
    return generator_terms(model, z1, z2), discriminator_terms(model, z1, z2)


def cycle_rows(model, z, direction):
    """Per-row L1 distance between z and its round trip through both transfer nets."""
    z = z.detach()
    return T.l1_distance(cycle_map(model, z, direction), z, axis=-1)


def cycle_loss(model, z1, z2):
    return T.mean(cycle_rows(model, z1, "1to2to1")) + T.mean(cycle_rows(model, z2, "2to1to2"))


def _value(x):
    return float(x.data) if isinstance(x, T.Tensor) else float(x)


def total_loss(recon, gen12, gen21, disc1, disc2, cycle, lambdas=DEFAULT_LAMBDAS, step=None):
    """Weighted objective of the minimizing players (discriminator terms excluded)."""
    l1, l2, l3 = (float(x) for x in lambdas)
    r, g12, g21, c = _value(recon), _value(gen12), _value(gen21), _value(cycle)
    bd = LossBreakdown(recon=r, gen_adv_12=g12, gen_adv_21=g21,
                       disc_1=_value(disc1), disc_2=_value(disc2), cycle=c,
                       total=l1 * r + l2 * (g12 + g21) + l3 * c,
                       lambda1=l1, lambda2=l2, lambda3=l3)
    if not bd.is_finite():
        raise TrainingDivergenceError(f"non-finite loss component at step {step}: {bd}",
                                      step=step, breakdown=bd)
    return bd
