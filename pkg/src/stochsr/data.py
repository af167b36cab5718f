"""Image I/O, color conversion, bicubic resampling, and patch sampling.

Images are float64 arrays of shape (H, W, C) with values in [0, 1],
stored on disk as binary PNM (P5 gray / P6 RGB, maxval 255). The
bicubic resampler uses the Keys kernel (a = -0.5) with kernel widening
on downscale for antialiasing and edge clamping at borders, the
degradation model conventionally used to synthesize LR inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class PnmError(ValueError):
    """Malformed or unsupported PNM data."""


class PnmMaxvalError(PnmError):
    """PNM maxval other than 255."""


@dataclass
class Image:
    values: np.ndarray  # (H, W, C) float64 in [0, 1]
    provenance: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got {v.shape}")
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")
        self.values = np.clip(v, 0.0, 1.0)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def to_nchw(image):
    """(H, W, C) image values -> (1, C, H, W) array."""
    return np.ascontiguousarray(image.values.transpose(2, 0, 1))[None]


def from_nchw(arr, provenance="", clip=True):
    """(C, H, W) or (1, C, H, W) array -> Image (clipped by default)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 4:
        if a.shape[0] != 1:
            raise ValueError("expected a single image")
        a = a[0]
    v = a.transpose(1, 2, 0)
    if clip:
        v = np.clip(v, 0.0, 1.0)
    return Image(v, provenance)


# -- PNM reader / writer -------------------------------------------------


def _read_header_tokens(data, n_tokens):
    """PNM header tokens after the magic, skipping '#' comments."""
    tokens = []
    i = 0
    while len(tokens) < n_tokens:
        if i >= len(data):
            raise PnmError("truncated PNM header")
        c = data[i : i + 1]
        if c == b"#":
            while i < len(data) and data[i : i + 1] != b"\n":
                i += 1
        elif c.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
                j += 1
            tokens.append(data[i:j])
            i = j
    # exactly one whitespace byte separates maxval from the payload
    if i >= len(data) or not data[i : i + 1].isspace():
        raise PnmError("missing whitespace after PNM header")
    return tokens, i + 1


def load_pnm(path):
    """Read a binary P5/P6 file (maxval 255) into a [0, 1] float image."""
    data = Path(path).read_bytes()
    if len(data) < 2 or data[:1] != b"P":
        raise PnmError(f"{path}: not a PNM file")
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise PnmError(f"{path}: unsupported PNM subformat {magic!r}")
    channels = 1 if magic == b"P5" else 3
    tokens, offset = _read_header_tokens(data[2:], 3)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise PnmError(f"{path}: malformed PNM header") from None
    if width < 1 or height < 1:
        raise PnmError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PnmMaxvalError(f"{path}: only maxval 255 is supported, got {maxval}")
    payload = data[2 + offset :]
    n = width * height * channels
    if len(payload) < n:
        raise PnmError(f"{path}: truncated payload ({len(payload)} < {n} bytes)")
    raw = np.frombuffer(payload[:n], dtype=np.uint8)
    values = raw.reshape(height, width, channels).astype(np.float64) / 255.0
    return Image(values, provenance=str(path))


def save_pnm(image, path):
    """Write a [0, 1] float image as binary P5 (gray) or P6 (RGB)."""
    if image.channels == 1:
        magic = b"P5"
    elif image.channels == 3:
        magic = b"P6"
    else:
        raise PnmError(f"cannot save {image.channels}-channel image as PNM")
    raw = np.rint(np.clip(image.values, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = b"%s\n%d %d\n255\n" % (magic, image.width, image.height)
    Path(path).write_bytes(header + raw.tobytes())


# -- color ----------------------------------------------------------------

# BT.601 studio-swing luma for RGB in [0, 1]
_Y_WEIGHTS = np.array([65.481, 128.553, 24.966])
_Y_OFFSET = 16.0


def rgb_to_y(image):
    """Luma channel (BT.601 studio swing), rescaled back to [0, 1]."""
    if image.channels != 3:
        raise ValueError("rgb_to_y expects a 3-channel image")
    y = (_Y_OFFSET + image.values @ _Y_WEIGHTS) / 255.0
    return Image(y[:, :, None], provenance=image.provenance)


# -- bicubic resampling ----------------------------------------------------


def keys_kernel(t, a=-0.5):
    """Keys cubic convolution kernel."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    out = np.zeros_like(t)
    m1 = t <= 1
    out[m1] = (a + 2) * t[m1] ** 3 - (a + 3) * t[m1] ** 2 + 1
    m2 = (t > 1) & (t < 2)
    out[m2] = a * t[m2] ** 3 - 5 * a * t[m2] ** 2 + 8 * a * t[m2] - 4 * a
    return out


def resize_weights(n_in, n_out, antialias):
    """Dense (n_out, n_in) resampling matrix for one axis.

    Center-aligned sampling; the kernel is widened by the shrink factor
    when downscaling (antialias) and out-of-range taps clamp to the
    border. Rows are normalized to sum exactly to 1.
    """
    factor = n_out / n_in
    width = max(1.0, 1.0 / factor) if antialias and factor < 1.0 else 1.0
    support = 2.0 * width
    centers = (np.arange(n_out) + 0.5) / factor - 0.5
    left = np.ceil(centers - support).astype(int)
    n_taps = int(2 * support) + 1
    taps = left[:, None] + np.arange(n_taps)[None, :]
    w = keys_kernel((centers[:, None] - taps) / width) / width
    w /= w.sum(axis=1, keepdims=True)
    taps = np.clip(taps, 0, n_in - 1)
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        np.add.at(mat[i], taps[i], w[i])
    return mat


def bicubic_resize(image, scale, direction):
    """Separable Keys-kernel resize by an integer or rational factor.

    direction 'down' divides the dimensions by `scale`, 'up' multiplies.
    Downscaling widens the kernel for antialiasing.
    """
    if direction not in ("down", "up"):
        raise ValueError("direction must be 'down' or 'up'")
    if scale <= 0:
        raise ValueError("scale must be positive")
    factor = (1.0 / scale) if direction == "down" else float(scale)
    h_out = int(round(image.height * factor))
    w_out = int(round(image.width * factor))
    if h_out < 1 or w_out < 1:
        raise ValueError(f"resize to {h_out}x{w_out} would be empty")
    antialias = direction == "down"
    wy = resize_weights(image.height, h_out, antialias)
    wx = resize_weights(image.width, w_out, antialias)
    v = np.einsum("ij,jkc->ikc", wy, image.values)
    v = np.einsum("kj,ijc->ikc", wx, v)
    return Image(np.clip(v, 0.0, 1.0), provenance=image.provenance)


# -- patches and augmentation ----------------------------------------------


@dataclass
class PatchPair:
    lr: Image
    hr: Image
    scale: int
    lr_origin: tuple = (0, 0)
    hr_origin: tuple = (0, 0)


def sample_patch_pair(hr_image, scale, patch, rng, lr_image=None):
    """Aligned LR/HR crops; HR origin is scale times the LR origin.

    `lr_image` may carry a precomputed bicubic downscale of `hr_image`;
    it is computed on the fly otherwise.
    """
    if lr_image is None:
        lr_image = bicubic_resize(hr_image, scale, "down")
    lh, lw = lr_image.height, lr_image.width
    if patch > lh or patch > lw:
        raise ValueError(f"patch {patch} exceeds LR image {lh}x{lw}")
    oy = int(rng.integers(0, lh - patch + 1))
    ox = int(rng.integers(0, lw - patch + 1))
    hy, hx, hp = oy * scale, ox * scale, patch * scale
    lr = Image(lr_image.values[oy : oy + patch, ox : ox + patch].copy())
    hr = Image(hr_image.values[hy : hy + hp, hx : hx + hp].copy())
    return PatchPair(lr, hr, scale, (oy, ox), (hy, hx))


def apply_dihedral(values, k):
    """Apply transform k of the dihedral group of the square (k in 0..7).

    k % 4 counts quarter-turns; k >= 4 adds a horizontal flip (applied
    after the rotation).
    """
    out = np.rot90(values, k % 4, axes=(0, 1))
    if k >= 4:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def augment(pair, rng):
    """Random dihedral transform applied identically to LR and HR."""
    if pair.lr.height != pair.lr.width:
        raise ValueError("augmentation requires square patches")
    k = int(rng.integers(0, 8))
    return PatchPair(
        Image(apply_dihedral(pair.lr.values, k)),
        Image(apply_dihedral(pair.hr.values, k)),
        pair.scale,
        pair.lr_origin,
        pair.hr_origin,
    )


# -- synthetic data ----------------------------------------------------------


def synth_dataset(n_images, size, rng, n_waves=12, n_edges=3):
    """Reproducible band-limited textures: sinusoid mixtures plus soft edges.

    Half of the sinusoids sit near the Nyquist rate, so downscaling
    genuinely destroys information: residuals at 2x stay meaningfully
    nonzero and super-resolution remains non-degenerate.
    """
    images = []
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for idx in range(n_images):
        base = np.zeros((size, size))
        for wave in range(n_waves):
            if wave % 3 == 0:
                f = rng.uniform(0.02, 0.2)
                amp = rng.uniform(0.2, 1.0) / np.sqrt(max(f, 0.05) * 20)
                envelope = 1.0
            else:
                # near-Nyquist detail confined to a smooth local region, so
                # reconstruction difficulty varies across the frame
                f = rng.uniform(0.2, 0.48)
                amp = rng.uniform(0.5, 1.2)
                cy, cx = rng.uniform(0.1, 0.9, 2) * size
                radius = rng.uniform(0.2, 0.5) * size
                envelope = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * radius**2))
            theta = rng.uniform(0.0, np.pi)
            phase = rng.uniform(0.0, 2 * np.pi)
            base += amp * envelope * np.sin(
                2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase
            )
        for _ in range(n_edges):
            theta = rng.uniform(0.0, np.pi)
            c = rng.uniform(0.2, 0.8) * size
            sharp = rng.uniform(0.5, 2.0)
            amp = rng.uniform(-1.0, 1.0)
            d = np.cos(theta) * xx + np.sin(theta) * yy - c
            base += amp / (1.0 + np.exp(-d / sharp))
        lo, hi = base.min(), base.max()
        lum = (base - lo) / (hi - lo) if hi > lo else np.full_like(base, 0.5)
        gains = rng.uniform(0.7, 1.0, 3)
        offsets = rng.uniform(0.0, 0.15, 3)
        v = np.clip(lum[:, :, None] * gains + offsets, 0.0, 1.0)
        images.append(Image(v, provenance=f"synth:{idx}"))
    return images


# -- dataset wrapper ---------------------------------------------------------


@dataclass
class PairedDataset:
    """HR images with precomputed bicubic LR counterparts."""

    hr: list
    lr: list
    scale: int
    names: list = field(default_factory=list)

    @classmethod
    def from_images(cls, images, scale):
        cropped = []
        for im in images:
            h = (im.height // scale) * scale
            w = (im.width // scale) * scale
            if h < scale or w < scale:
                raise ValueError("image too small for scale")
            cropped.append(Image(im.values[:h, :w], provenance=im.provenance))
        lr = [bicubic_resize(im, scale, "down") for im in cropped]
        names = [im.provenance or f"image{i}" for i, im in enumerate(cropped)]
        return cls(cropped, lr, scale, names)

    @classmethod
    def from_dir(cls, root, scale):
        paths = sorted(Path(root, "HR").glob("*.ppm")) + sorted(Path(root, "HR").glob("*.pgm"))
        if not paths:
            raise FileNotFoundError(f"no HR/*.ppm images under {root}")
        return cls.from_images([load_pnm(p) for p in paths], scale)

    @classmethod
    def synthetic(cls, n_images, size, scale, rng):
        return cls.from_images(synth_dataset(n_images, size, rng), scale)

    def __len__(self):
        return len(self.hr)

    def sample_batch(self, rng, batch, patch, augment_pairs=True):
        """Stacked (lr, hr) NCHW float64 batch of aligned random patches."""
        lrs, hrs = [], []
        for _ in range(batch):
            i = int(rng.integers(0, len(self.hr)))
            pair = sample_patch_pair(self.hr[i], self.scale, patch, rng, self.lr[i])
            if augment_pairs:
                pair = augment(pair, rng)
            lrs.append(pair.lr.values.transpose(2, 0, 1))
            hrs.append(pair.hr.values.transpose(2, 0, 1))
        return np.stack(lrs), np.stack(hrs)
