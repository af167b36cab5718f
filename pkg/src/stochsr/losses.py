"""Reconstruction objectives for super-resolution training.

Besides plain l1/l2 regression this module implements the stochastic
expected-absolute-error family: a trainable-sigma variant (whose sigma
collapses to zero during training), a constant-sigma variant equivalent
to training on noised targets (Noise2Noise style, which suffers random
gradient sign flips), and the data-adaptive variant where the noise
scale is the current absolute residual itself. The data-adaptive loss
keeps the l1 gradient direction for every noise draw while its expected
per-element gradient magnitude is the constant E|1 - Z| ~ 1.1666.

An auxiliary branch loss regresses a normalized sigma map onto the
(optionally thresholded) absolute residual, with the mean branch
detached so only the sigma parameters receive gradient.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import EXPECTED_GRAD_MAGNITUDE, normal_abs_moment

VARIANTS = ("l1", "l2", "trainable_sigma", "constant_sigma", "data_adaptive")
REDUCTIONS = ("mean", "sum")


@dataclass
class LossSpec:
    """Selects the training objective and its constants.

    kT rescales the expected-abs loss (partition constant), beta weighs
    the auxiliary sigma regression, k_noise is the constant noise level
    of the constant-sigma variant, n_samples the number of noise draws
    per step, and threshold_aux zeroes below-average residual targets so
    the sigma branch focuses on hard pixels.
    """

    variant: str = "data_adaptive"
    kT: float = 1.0
    beta: float = 0.01
    k_noise: float = 0.01
    n_samples: int = 1
    reduction: str = "mean"
    threshold_aux: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction {self.reduction!r}")
        if not self.kT > 0:
            raise ValueError("kT must be positive")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.k_noise < 0:
            raise ValueError("k_noise must be non-negative")


def _check_shapes(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _as_constant(z, like_shape):
    """Validate a pre-sampled noise array: off-tape, shape-compatible."""
    if isinstance(z, Tensor):
        if z.requires_grad:
            raise ValueError("noise must be off the tape (detach it first)")
        z = z.values
    z = np.asarray(z, dtype=np.float64)
    if z.shape not in ((), tuple(like_shape)) and z.shape[1:] != tuple(like_shape):
        raise ValueError(f"noise shape {z.shape} incompatible with {like_shape}")
    return z


def _n_draws(z, like_shape):
    if z.shape != () and z.shape != tuple(like_shape):
        return z.shape[0]
    return 1


def _reduce_draws(summed, reduction, n_draws):
    """Sum reduction averages over draws; mean already does."""
    loss = ad.reduce(summed, reduction)
    if reduction == "sum" and n_draws > 1:
        loss = loss * (1.0 / n_draws)
    return loss


def l1_loss(mu, target, reduction="mean"):
    """Reduced |target - mu|."""
    _check_shapes(mu, target, "l1_loss")
    return ad.reduce(ad.abs_(ad.sub(target, mu)), reduction)


def l2_loss(mu, target, reduction="mean"):
    """Reduced (target - mu)^2."""
    _check_shapes(mu, target, "l2_loss")
    d = ad.sub(target, mu)
    return ad.reduce(ad.mul(d, d), reduction)


def expected_l1_trainable_sigma(mu, sigma, target, z, spec):
    """(1/kT) * reduce |target - (mu + sigma * z)|, averaged over draws.

    Gradients flow to mu and sigma; z is treated as a constant. Collapses
    exactly to (1/kT) * l1 when z = 0 or sigma = 0.
    """
    _check_shapes(mu, target, "expected_l1_trainable_sigma")
    _check_shapes(sigma, target, "expected_l1_trainable_sigma")
    if np.any(sigma.values < 0):
        raise ValueError("sigma must be non-negative (apply sigmoid or abs first)")
    z = _as_constant(z, mu.shape)
    pred = ad.add(mu, ad.mul(sigma, z))
    loss = _reduce_draws(ad.abs_(ad.sub(target, pred)), spec.reduction, _n_draws(z, mu.shape))
    if spec.kT != 1.0:
        loss = loss * (1.0 / spec.kT)
    return loss


def noise2noise_loss(mu, target, z, k_noise, spec):
    """reduce |(target + k_noise * z) - mu|: regression on noised targets.

    Gradient reaches only mu. With k_noise = 0 this silently degenerates
    to l1, which is reported with a warning.
    """
    _check_shapes(mu, target, "noise2noise_loss")
    if k_noise == 0:
        warnings.warn("noise2noise_loss with k_noise=0 falls back to l1_loss")
        return l1_loss(mu, target, spec.reduction)
    z = _as_constant(z, mu.shape)
    noised = target.values + k_noise * z
    loss = _reduce_draws(ad.abs_(ad.sub(Tensor(noised), mu)), spec.reduction, _n_draws(z, mu.shape))
    return loss


def data_adaptive_loss(mu, target, z, spec):
    """reduce |r - |r| * z| with r = target - mu, averaged over draws.

    The noise scale is the live residual magnitude; backprop flows
    through both occurrences of mu, which makes the per-element gradient
    -sgn(r) * |1 - sgn(r) z|: always the l1 descent direction.
    """
    _check_shapes(mu, target, "data_adaptive_loss")
    z = _as_constant(z, mu.shape)
    r = ad.sub(target, mu)
    spread = ad.mul(ad.abs_(r), z)
    return _reduce_draws(ad.abs_(ad.sub(r, spread)), spec.reduction, _n_draws(z, mu.shape))


def threshold_residual(resid):
    """Zero residual entries strictly below their per-image mean.

    Images are leading-axis entries for 4-D (NCHW) input; lower-rank
    input is treated as a single image.
    """
    if resid.ndim == 4:
        mean = resid.mean(axis=(1, 2, 3), keepdims=True)
    else:
        mean = resid.mean()
    return np.where(resid < mean, 0.0, resid)


def aux_sigma_loss(sigma, mu_detached, target, spec):
    """beta * reduce |resid - sigma| with resid = |target - mu| held constant.

    Only the sigma branch receives gradient. With spec.threshold_aux the
    below-average residuals are zeroed first so sigma concentrates on
    hard pixels.
    """
    mu_vals = mu_detached.values if isinstance(mu_detached, Tensor) else np.asarray(mu_detached)
    if isinstance(mu_detached, Tensor) and mu_detached.requires_grad:
        raise ValueError("mu must be detached before the auxiliary loss")
    if sigma.shape != mu_vals.shape:
        raise ValueError(f"aux_sigma_loss: shape mismatch {sigma.shape} vs {mu_vals.shape}")
    _check_shapes(sigma, target, "aux_sigma_loss")
    resid = np.abs(target.values - mu_vals)
    if spec.threshold_aux:
        resid = threshold_residual(resid)
    loss = ad.reduce(ad.abs_(ad.sub(Tensor(resid), sigma)), spec.reduction)
    return loss * spec.beta


def combined_objective(mu, sigma, target, z, spec):
    """Data-adaptive loss plus the auxiliary sigma regression.

    The mean prediction entering the auxiliary term is detached, so
    trunk gradients equal those of the data-adaptive loss alone.
    """
    loss = data_adaptive_loss(mu, target, z, spec)
    if sigma is not None and spec.beta > 0:
        loss = ad.add(loss, aux_sigma_loss(sigma, mu.detach(), target, spec))
    return loss


def jensen_gap(mu, sigma, target, n_mc, rng, chunk=65536):
    """Monte-Carlo E_z sum|r - sigma z| and the deterministic sum|r|.

    The expectation upper-bounds the l1 value (equality at sigma = 0).
    Pure numpy; nothing lands on the tape.
    """
    mu = np.asarray(getattr(mu, "values", mu), dtype=np.float64).ravel()
    sigma = np.asarray(getattr(sigma, "values", sigma), dtype=np.float64).ravel()
    target = np.asarray(getattr(target, "values", target), dtype=np.float64).ravel()
    if np.any(sigma < 0):
        raise ValueError("sigma must be non-negative")
    r = target - mu
    l1 = float(np.abs(r).sum())
    total = 0.0
    done = 0
    while done < n_mc:
        m = min(chunk // max(r.size, 1) + 1, n_mc - done)
        z = rng.standard_normal((m, r.size))
        total += np.abs(r[None, :] - sigma[None, :] * z).sum()
        done += m
    return total / n_mc, l1


def expected_value_oracle(mu, sigma, target, spec):
    """Closed-form E_z of the trainable-sigma loss via E|a + b Z|."""
    r = (target.values - mu.values).ravel()
    s = sigma.values.ravel()
    per_elem = normal_abs_moment(r, s)
    total = float(np.sum(per_elem))
    if spec.reduction == "mean":
        total /= r.size
    return total / spec.kT


__all__ = [
    "LossSpec",
    "VARIANTS",
    "REDUCTIONS",
    "l1_loss",
    "l2_loss",
    "expected_l1_trainable_sigma",
    "noise2noise_loss",
    "data_adaptive_loss",
    "threshold_residual",
    "aux_sigma_loss",
    "combined_objective",
    "jensen_gap",
    "expected_value_oracle",
    "EXPECTED_GRAD_MAGNITUDE",
]
