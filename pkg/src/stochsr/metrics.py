"""Evaluation: PSNR, SSIM, predictive log-likelihood, uncertainty quality.

PSNR and SSIM follow the SR convention: computed on the BT.601 luma
channel after cropping `scale` pixels from every border, with peak 255.
PLL is the mean per-pixel Gaussian log-density of the ground truth
under the predicted (mu, sigma). residual_psnr measures how well a
sigma map matches the actual absolute fitting error.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

from .data import Image, rgb_to_y
from .distributions import gaussian_logpdf


@dataclass
class EvalProtocol:
    channel: str = "y"
    border_crop: int = 0
    peak: float = 255.0
    psnr_cap: float = 99.0

    def __post_init__(self):
        if self.channel not in ("y", "rgb"):
            raise ValueError("channel must be 'y' or 'rgb'")
        if self.border_crop < 0:
            raise ValueError("border_crop must be >= 0")


def _prepare(a, b, proto):
    if (a.height, a.width, a.channels) != (b.height, b.width, b.channels):
        raise ValueError("images must have identical dimensions")
    if proto.channel == "y" and a.channels == 3:
        a, b = rgb_to_y(a), rgb_to_y(b)
    va, vb = a.values, b.values
    c = proto.border_crop
    if c > 0:
        if va.shape[0] <= 2 * c or va.shape[1] <= 2 * c:
            raise ValueError("border crop leaves an empty region")
        va = va[c:-c, c:-c]
        vb = vb[c:-c, c:-c]
    return va * proto.peak, vb * proto.peak


def psnr(a, b, proto=EvalProtocol()):
    """10 log10(peak^2 / MSE) after channel selection and border crop."""
    va, vb = _prepare(a, b, proto)
    mse = float(np.mean((va - vb) ** 2))
    if mse == 0.0:
        return proto.psnr_cap
    return 10.0 * math.log10(proto.peak**2 / mse)


_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def _gaussian_window():
    half = (_SSIM_WINDOW - 1) / 2.0
    coords = np.arange(_SSIM_WINDOW) - half
    g = np.exp(-(coords**2) / (2.0 * _SSIM_SIGMA**2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_maps(x, y, peak):
    """Local luminance and contrast-structure SSIM factor maps."""
    w = _gaussian_window()
    c1 = (_SSIM_K1 * peak) ** 2
    c2 = (_SSIM_K2 * peak) ** 2
    mu_x = correlate(x, w, mode="valid", method="direct")
    mu_y = correlate(y, w, mode="valid", method="direct")
    xx = correlate(x * x, w, mode="valid", method="direct") - mu_x**2
    yy = correlate(y * y, w, mode="valid", method="direct") - mu_y**2
    xy = correlate(x * y, w, mode="valid", method="direct") - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    cs = (2 * xy + c2) / (xx + yy + c2)
    return lum, cs


def ssim(a, b, proto=EvalProtocol()):
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, K1/K2 = 0.01/0.03."""
    va, vb = _prepare(a, b, proto)
    if va.shape[0] < _SSIM_WINDOW or va.shape[1] < _SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    vals = []
    for ch in range(va.shape[2]):
        lum, cs = _ssim_maps(va[:, :, ch], vb[:, :, ch], proto.peak)
        vals.append(np.mean(lum * cs))
    return float(np.mean(vals))


def ssim_components(a, b, proto=EvalProtocol()):
    """Mean luminance and contrast-structure terms (first channel)."""
    va, vb = _prepare(a, b, proto)
    lum, cs = _ssim_maps(va[:, :, 0], vb[:, :, 0], proto.peak)
    return float(np.mean(lum)), float(np.mean(cs))


def pll(sr_mu, sr_sigma, hr, aggregate="mean"):
    """Predictive log-likelihood of hr under N(mu, sigma^2), per pixel.

    Evaluated on the [0, 1] scale with sigma floored; `aggregate` may be
    'mean' (default, reported per pixel) or 'sum' (per image).
    """
    mu = sr_mu.values if isinstance(sr_mu, Image) else np.asarray(sr_mu)
    sig = sr_sigma.values if isinstance(sr_sigma, Image) else np.asarray(sr_sigma)
    target = hr.values if isinstance(hr, Image) else np.asarray(hr)
    if mu.shape != target.shape or np.broadcast_shapes(sig.shape, mu.shape) != mu.shape:
        raise ValueError("pll requires matching dimensions")
    lp = gaussian_logpdf(target, mu, np.broadcast_to(sig, mu.shape))
    if aggregate == "sum":
        return float(np.sum(lp))
    return float(np.mean(lp))


class StreamingMean:
    """Running mean over arrays of any shape."""

    def __init__(self):
        self._sum = 0.0
        self._count = 0

    def update(self, values):
        v = np.asarray(values, dtype=np.float64)
        self._sum += float(v.sum())
        self._count += v.size
        return self

    @property
    def value(self):
        if self._count == 0:
            raise ValueError("no values accumulated")
        return self._sum / self._count


def constant_sigma_baseline(residual_stream):
    """Mean absolute fitting error over a stream, used as a constant sigma map."""
    acc = StreamingMean()
    for r in residual_stream:
        acc.update(r)
    return acc.value


def residual_psnr(sigma, residual, peak=255.0, cap=99.0):
    """PSNR between a sigma map and the actual absolute error map.

    Both maps are scaled by `peak`; computed per channel on the full
    image (no luma conversion, no crop), then averaged.
    """
    s = sigma.values if isinstance(sigma, Image) else np.asarray(sigma)
    r = residual.values if isinstance(residual, Image) else np.asarray(residual)
    if s.shape != r.shape:
        raise ValueError("sigma and residual maps must have identical dimensions")
    if s.ndim == 2:
        s, r = s[:, :, None], r[:, :, None]
    out = []
    for ch in range(s.shape[2]):
        mse = float(np.mean(((s[:, :, ch] - r[:, :, ch]) * peak) ** 2))
        out.append(cap if mse == 0.0 else 10.0 * math.log10(peak**2 / mse))
    return float(np.mean(out))
