"""Adam training loop with a halving learning-rate schedule.

Desk-scale defaults (20k iterations, batch 8, 16-pixel LR patches)
preserve the shape of the full-scale protocol -- Adam with beta1 0.9,
beta2 0.999, eps 1e-8, initial rate 1e-4 halved on a fixed cadence --
at a few minutes of CPU time. Runs are bitwise reproducible from
(seed, config, dataset).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Tensor, backward
from .data import PairedDataset
from .distributions import Rng
from .losses import (
    LossSpec,
    combined_objective,
    data_adaptive_loss,
    expected_l1_trainable_sigma,
    l1_loss,
    l2_loss,
    noise2noise_loss,
)
from .models import TwoBranchModel, save_checkpoint

TELEMETRY_HEADER = ("iter", "loss", "mean_sigma", "lr", "wall_ms")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: LossSpec = field(default_factory=LossSpec)
    batch: int = 8
    patch: int = 16
    lr0: float = 1e-4
    halve_every: int = 5000
    total_iters: int = 20000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    telemetry_every: int = 100
    sigma_warm_start: int = 0  # iterations before the sigma branch trains
    augment: bool = True
    timing: bool = False  # real wall_ms breaks bitwise reproducibility

    def __post_init__(self):
        if min(self.batch, self.patch, self.total_iters, self.halve_every) < 1:
            raise ValueError("batch, patch, total_iters, halve_every must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.lr0 <= 0 or self.eps <= 0:
            raise ValueError("lr0 and eps must be positive")


def lr_at(iteration, cfg):
    """lr0 * 2^-(floor(iteration / halve_every))."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return cfg.lr0 * 2.0 ** -(iteration // cfg.halve_every)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params):
        zeros = lambda p: np.zeros(p.shape, dtype=np.float64)
        return cls({k: zeros(p) for k, p in params.items()},
                   {k: zeros(p) for k, p in params.items()})


def adam_step(params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update in place; params without grad are skipped."""
    state.t += 1
    bc1 = 1.0 - beta1**state.t
    bc2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name!r}")
        state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.values = p.values - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class TrainReport:
    telemetry: list
    checkpoints: list
    final_loss: float
    iterations: int
    telemetry_path: str | None = None


def _draw_noise(rng, spec, shape):
    if spec.n_samples > 1:
        return rng.standard_normal((spec.n_samples,) + tuple(shape))
    return rng.standard_normal(tuple(shape))


def _iteration_loss(model, lr_batch, hr_batch, spec, z_rng, iteration, warm_start):
    """Forward + loss for one batch; returns (loss tensor, mean sigma)."""
    hr = Tensor(hr_batch)
    variant = spec.variant
    want_sigma = model.has_sigma_branch and (
        variant == "trainable_sigma"
        or (variant == "data_adaptive" and spec.beta > 0 and iteration > warm_start)
    )
    mu, sigma = model.forward(Tensor(lr_batch), want_sigma=want_sigma)
    mean_sigma = float(sigma.values.mean()) if sigma is not None else 0.0
    if variant == "l1":
        return l1_loss(mu, hr, spec.reduction), mean_sigma
    if variant == "l2":
        return l2_loss(mu, hr, spec.reduction), mean_sigma
    z = _draw_noise(z_rng, spec, hr_batch.shape)
    if variant == "trainable_sigma":
        if sigma is None:
            raise ValueError("trainable_sigma requires a model with a sigma branch")
        return expected_l1_trainable_sigma(mu, sigma, hr, z, spec), mean_sigma
    if variant == "constant_sigma":
        return noise2noise_loss(mu, hr, z, spec.k_noise, spec), mean_sigma
    if sigma is not None:
        return combined_objective(mu, sigma, hr, z, spec), mean_sigma
    return data_adaptive_loss(mu, hr, z, spec), mean_sigma


def train(model, dataset, cfg, out_dir=None):
    """Run the optimization loop; returns telemetry and checkpoint paths.

    Per iteration: sample + augment a batch, forward, draw noise, build
    the configured loss, backpropagate, Adam step, zero gradients.
    Checkpoints are written at each halving boundary and at the end.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    params = model.parameters()
    state = AdamState.for_params(params)
    data_rng = Rng(cfg.seed).spawn(1)
    z_rng = Rng(cfg.seed).spawn(2)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    telemetry = []
    checkpoints = []
    loss_value = float("nan")
    for i in range(1, cfg.total_iters + 1):
        for p in params.values():
            assert p.grad is None, "gradients leaked across iterations"
        t0 = time.perf_counter() if cfg.timing else 0.0
        lr_batch, hr_batch = dataset.sample_batch(data_rng, cfg.batch, cfg.patch, cfg.augment)
        loss, mean_sigma = _iteration_loss(
            model, lr_batch, hr_batch, cfg.loss, z_rng, i, cfg.sigma_warm_start
        )
        loss_value = loss.item()
        if not np.isfinite(loss_value):
            raise TrainingDiverged(
                f"non-finite loss at iteration {i}; last checkpoint retained: "
                f"{checkpoints[-1] if checkpoints else 'none'}"
            )
        backward(loss)
        adam_step(params, state, lr_at(i - 1, cfg), cfg.beta1, cfg.beta2, cfg.eps)
        model.zero_grad()
        wall_ms = (time.perf_counter() - t0) * 1e3 if cfg.timing else 0.0
        if i == 1 or i == cfg.total_iters or i % cfg.telemetry_every == 0:
            telemetry.append(
                {
                    "iter": i,
                    "loss": loss_value,
                    "mean_sigma": mean_sigma,
                    "lr": lr_at(i - 1, cfg),
                    "wall_ms": wall_ms,
                }
            )
        if out is not None and (i % cfg.halve_every == 0 or i == cfg.total_iters):
            ck = out / f"ckpt_{i:07d}.bin"
            if not ck.exists():
                save_checkpoint(model, ck)
                checkpoints.append(str(ck))
    telemetry_path = None
    if out is not None:
        telemetry_path = str(out / "telemetry.csv")
        write_telemetry(telemetry_path, telemetry, cfg)
    return TrainReport(telemetry, checkpoints, loss_value, cfg.total_iters, telemetry_path)


def write_telemetry(path, rows, cfg):
    """CSV with a comment line recording the loss variant and seed."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# variant={cfg.loss.variant} seed={cfg.seed}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TELEMETRY_HEADER)
        for row in rows:
            writer.writerow([row["iter"], repr(row["loss"]), repr(row["mean_sigma"]),
                             repr(row["lr"]), repr(row["wall_ms"])])
