"""Two-branch super-resolution network on the autodiff engine.

The mean trunk is a small EDSR-style stack: head conv, residual blocks
(conv-relu-conv with identity skip, no normalization), then an
upsampler built from a channel-expanding conv, a single pixel shuffle,
and a 3x3 output conv. The sigma branch taps the trunk's pre-upsampling
feature map (configurable to tap the raw input instead), applies
conv+PReLU blocks, its own upsampler, and a sigmoid so its output lives
in (0, 1). Only the mean output is needed at inference time; the sigma
branch is evaluated lazily.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distributions import Rng

CHECKPOINT_MAGIC = b"SRCK"
CHECKPOINT_VERSION = 1

SIGMA_TAPS = ("trunk_features", "lr_input")


@dataclass
class TrunkConfig:
    feature_channels: int = 8
    n_resblocks: int = 1
    scale: int = 2
    in_channels: int = 3

    def __post_init__(self):
        if self.scale not in (2, 3, 4):
            raise ValueError("scale must be 2, 3 or 4")
        if self.feature_channels < 1 or self.n_resblocks < 0:
            raise ValueError("invalid trunk configuration")


@dataclass
class SigmaBranchConfig:
    channels: int = 160
    n_blocks: int = 4
    kernel: int = 3
    tap: str = "trunk_features"

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError("sigma branch kernel must be odd")
        if self.tap not in SIGMA_TAPS:
            raise ValueError(f"sigma tap must be one of {SIGMA_TAPS}")


class TwoBranchModel:
    """Mean trunk plus optional sigma branch; parameters in a flat dict."""

    def __init__(self, trunk: TrunkConfig, sigma: SigmaBranchConfig | None, rng: Rng):
        self.trunk = trunk
        self.sigma = sigma
        self.params: dict[str, Tensor] = {}
        self.mu_forwards = 0
        self.sigma_forwards = 0
        self._init_params(rng)

    # -- construction -------------------------------------------------

    def _add_conv(self, name, c_in, c_out, k, rng):
        bound = 1.0 / np.sqrt(c_in * k * k)
        w = rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def _init_params(self, rng):
        t = self.trunk
        f, s = t.feature_channels, t.scale
        self._add_conv("trunk.head", t.in_channels, f, 3, rng)
        for i in range(t.n_resblocks):
            self._add_conv(f"trunk.res{i}.conv1", f, f, 3, rng)
            self._add_conv(f"trunk.res{i}.conv2", f, f, 3, rng)
        self._add_conv("trunk.up", f, f * s * s, 3, rng)
        self._add_conv("trunk.out", f, t.in_channels, 3, rng)
        if self.sigma is not None:
            sb = self.sigma
            c_in = f if sb.tap == "trunk_features" else t.in_channels
            for j in range(sb.n_blocks):
                self._add_conv(f"sigma.block{j}", c_in, sb.channels, sb.kernel, rng)
                self.params[f"sigma.block{j}.slope"] = Tensor(0.25, requires_grad=True)
                c_in = sb.channels
            self._add_conv("sigma.up", sb.channels, sb.channels * s * s, 3, rng)
            self._add_conv("sigma.out", sb.channels, t.in_channels, 3, rng)

    # -- parameter access ---------------------------------------------

    def parameters(self):
        return self.params

    def trunk_parameters(self):
        return {k: v for k, v in self.params.items() if k.startswith("trunk.")}

    def sigma_parameters(self):
        return {k: v for k, v in self.params.items() if k.startswith("sigma.")}

    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    @property
    def has_sigma_branch(self):
        return self.sigma is not None

    # -- forward -------------------------------------------------------

    def _conv(self, name, x):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _trunk_features(self, x):
        h = self._conv("trunk.head", x)
        for i in range(self.trunk.n_resblocks):
            b = ad.relu(self._conv(f"trunk.res{i}.conv1", h))
            b = self._conv(f"trunk.res{i}.conv2", b)
            h = ad.add(h, b)
        return h

    def _upsample(self, prefix, h):
        u = ad.pixel_shuffle(self._conv(f"{prefix}.up", h), self.trunk.scale)
        return self._conv(f"{prefix}.out", u)

    def forward(self, x, want_sigma=False):
        """Super-resolve a batch. Returns (mu, sigma-or-None).

        mu is unbounded (clip only at evaluation time); sigma, when
        requested, is sigmoid-normalized to (0, 1).
        """
        x = ad.as_tensor(x)
        if x.values.ndim != 4 or x.shape[1] != self.trunk.in_channels:
            raise ValueError(
                f"expected N,{self.trunk.in_channels},H,W input, got {x.shape}"
            )
        self.mu_forwards += 1
        feats = self._trunk_features(x)
        mu = self._upsample("trunk", feats)
        if not want_sigma:
            return mu, None
        if self.sigma is None:
            raise ValueError("model has no sigma branch")
        self.sigma_forwards += 1
        h = feats if self.sigma.tap == "trunk_features" else x
        for j in range(self.sigma.n_blocks):
            h = ad.prelu(self._conv(f"sigma.block{j}", h), self.params[f"sigma.block{j}.slope"])
        sigma = ad.sigmoid(self._upsample("sigma", h))
        return mu, sigma


def build_model(trunk, sigma, rng):
    """Construct a TwoBranchModel; same (configs, seed) gives identical parameters."""
    return TwoBranchModel(trunk, sigma, rng)


# -- checkpoint container ----------------------------------------------


def _config_header(model):
    return {
        "version": CHECKPOINT_VERSION,
        "trunk": asdict(model.trunk),
        "sigma": asdict(model.sigma) if model.sigma is not None else None,
    }


def save_checkpoint(model, path):
    """Write the versioned binary container plus a text manifest.

    Layout: magic, u32 version, u32 header length, JSON config header,
    then each parameter tensor in declaration order as little-endian
    float64. The manifest lists name, shape, and crc32 per tensor.
    """
    header = json.dumps(_config_header(model), sort_keys=True, separators=(",", ":")).encode()
    manifest_lines = []
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.array(CHECKPOINT_VERSION, dtype="<u4").tobytes())
        fh.write(np.array(len(header), dtype="<u4").tobytes())
        fh.write(header)
        for name, p in model.params.items():
            raw = np.ascontiguousarray(p.values, dtype="<f8").tobytes()
            fh.write(raw)
            shape = "x".join(str(d) for d in p.shape) or "scalar"
            manifest_lines.append(f"{name}\t{shape}\t{zlib.crc32(raw):08x}")
    manifest = str(path) + ".manifest.txt"
    with open(manifest, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(manifest_lines) + "\n")
    return manifest


def load_checkpoint(path, verify=True):
    """Rebuild a model from a checkpoint container."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        header = json.loads(fh.read(header_len).decode())
        trunk = TrunkConfig(**header["trunk"])
        sigma = SigmaBranchConfig(**header["sigma"]) if header["sigma"] else None
        model = TwoBranchModel(trunk, sigma, Rng(0))
        for name, p in model.params.items():
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"checkpoint truncated at tensor {name}")
            p.values = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(p.shape)
        if fh.read(1):
            raise ValueError("trailing bytes after last tensor")
    if verify:
        _verify_manifest(model, str(path) + ".manifest.txt")
    return model


def _verify_manifest(model, manifest_path):
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            lines = [ln for ln in fh.read().splitlines() if ln]
    except FileNotFoundError:
        return
    names = list(model.params)
    if len(lines) != len(names):
        raise ValueError("manifest does not match checkpoint tensor count")
    for name, line in zip(names, lines):
        mname, _, crc = line.split("\t")
        raw = np.ascontiguousarray(model.params[name].values, dtype="<f8").tobytes()
        if mname != name or f"{zlib.crc32(raw):08x}" != crc:
            raise ValueError(f"manifest mismatch for tensor {name}")
