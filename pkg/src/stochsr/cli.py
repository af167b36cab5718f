"""Command-line workflows: train, eval, analyze, uncertainty.

Runs are configured by a flat key/value config file with sections
([dataset], [model], [train]); command-line flags override file values.
Every run writes an effective-config echo into the output directory so
it can be reproduced exactly. Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import (
    EXPERIMENTS,
    gradient_magnitude_experiment,
    gradient_sign_experiment,
    jensen_experiment,
    sigma_degradation_experiment,
)
from .autodiff import Tensor
from .data import (
    Image,
    PairedDataset,
    bicubic_resize,
    from_nchw,
    load_pnm,
    save_pnm,
    to_nchw,
)
from .distributions import Rng
from .losses import LossSpec
from .metrics import EvalProtocol, constant_sigma_baseline, pll, psnr, residual_psnr, ssim
from .models import SigmaBranchConfig, TrunkConfig, build_model, load_checkpoint
from .trainer import TrainConfig, TrainingDiverged, train

# schema: section -> key -> (converter, default)
_BOOL = lambda s: s.lower() in ("1", "true", "yes", "on")
SCHEMA = {
    "dataset": {
        "kind": (str, "synthetic"),
        "path": (str, ""),
        "n_images": (int, 6),
        "size": (int, 64),
        "scale": (int, 2),
    },
    "model": {
        "feature_channels": (int, 8),
        "n_resblocks": (int, 1),
        "sigma_enabled": (_BOOL, True),
        "sigma_channels": (int, 8),
        "sigma_blocks": (int, 4),
        "sigma_kernel": (int, 3),
        "sigma_tap": (str, "trunk_features"),
    },
    "train": {
        "loss": (str, "data_adaptive"),
        "kt": (float, 1.0),
        "beta": (float, 0.01),
        "k_noise": (float, 0.01),
        "n_samples": (int, 1),
        "reduction": (str, "mean"),
        "threshold_aux": (_BOOL, True),
        "batch": (int, 8),
        "patch": (int, 16),
        "lr0": (float, 1e-4),
        "halve_every": (int, 5000),
        "total_iters": (int, 20000),
        "telemetry_every": (int, 100),
        "sigma_warm_start": (int, 0),
        "augment": (_BOOL, True),
    },
}


class UsageError(Exception):
    pass


def read_config(path):
    """Parse and validate a config file against the schema."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    loaded = parser.read(path)
    if not loaded:
        raise UsageError(f"config file not found: {path}")
    for sec in parser.sections():
        if sec not in SCHEMA:
            raise UsageError(f"unknown config section [{sec}]")
        for key, raw in parser.items(sec):
            if key not in SCHEMA[sec]:
                raise UsageError(f"unknown config key {key!r} in section [{sec}]")
            conv = SCHEMA[sec][key][0]
            value = raw.strip().strip('"')
            try:
                cfg[sec][key] = conv(value)
            except ValueError:
                raise UsageError(f"bad value for {sec}.{key}: {raw!r}") from None
    return cfg


def write_effective_config(cfg, seed, out_dir, extra=None):
    lines = [f"seed = {seed}"]
    for sec in sorted(cfg):
        lines.append(f"[{sec}]")
        for key in sorted(cfg[sec]):
            lines.append(f"{key} = {cfg[sec][key]}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    path = Path(out_dir) / "effective_config.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _build_dataset(dcfg, seed):
    if dcfg["kind"] == "synthetic":
        return PairedDataset.synthetic(dcfg["n_images"], dcfg["size"], dcfg["scale"], Rng(seed).spawn(11))
    if dcfg["kind"] == "dir":
        if not dcfg["path"]:
            raise UsageError("dataset.kind=dir requires dataset.path")
        return PairedDataset.from_dir(dcfg["path"], dcfg["scale"])
    raise UsageError(f"unknown dataset kind {dcfg['kind']!r}")


def _build_model(mcfg, dcfg, seed):
    trunk = TrunkConfig(
        feature_channels=mcfg["feature_channels"],
        n_resblocks=mcfg["n_resblocks"],
        scale=dcfg["scale"],
    )
    sigma = None
    if mcfg["sigma_enabled"]:
        sigma = SigmaBranchConfig(
            channels=mcfg["sigma_channels"],
            n_blocks=mcfg["sigma_blocks"],
            kernel=mcfg["sigma_kernel"],
            tap=mcfg["sigma_tap"],
        )
    return build_model(trunk, sigma, Rng(seed).spawn(12))


def _train_config(tcfg, seed):
    loss = LossSpec(
        variant=tcfg["loss"],
        kT=tcfg["kt"],
        beta=tcfg["beta"],
        k_noise=tcfg["k_noise"],
        n_samples=tcfg["n_samples"],
        reduction=tcfg["reduction"],
        threshold_aux=tcfg["threshold_aux"],
    )
    return TrainConfig(
        loss=loss,
        batch=tcfg["batch"],
        patch=tcfg["patch"],
        lr0=tcfg["lr0"],
        halve_every=tcfg["halve_every"],
        total_iters=tcfg["total_iters"],
        seed=seed,
        telemetry_every=tcfg["telemetry_every"],
        sigma_warm_start=tcfg["sigma_warm_start"],
        augment=tcfg["augment"],
    )


def cmd_train(args):
    cfg = read_config(args.config)
    if args.loss:
        cfg["train"]["loss"] = args.loss
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, args.seed, out)
    dataset = _build_dataset(cfg["dataset"], args.seed)
    model = _build_model(cfg["model"], cfg["dataset"], args.seed)
    if cfg["train"]["loss"] == "trainable_sigma" and not model.has_sigma_branch:
        raise UsageError("trainable_sigma requires model.sigma_enabled = true")
    tc = _train_config(cfg["train"], args.seed)
    try:
        report = train(model, dataset, tc, out_dir=out)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"trained {report.iterations} iterations, final loss {report.final_loss:.6f}")
    print(f"telemetry: {report.telemetry_path}")
    for ck in report.checkpoints:
        print(f"checkpoint: {ck}")
    return 0


def _sr_for_image(model, lr_image, want_sigma):
    mu_t, sigma_t = model.forward(Tensor(to_nchw(lr_image)), want_sigma=want_sigma)
    mu = from_nchw(mu_t.values)
    sigma = from_nchw(sigma_t.values, clip=False) if sigma_t is not None else None
    return mu, sigma


def cmd_eval(args):
    cfg = read_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    scale = model.trunk.scale
    cfg["dataset"]["scale"] = scale
    write_effective_config(cfg, args.seed, out, {"checkpoint": args.checkpoint, "channel": args.channel})
    dataset = _build_dataset(cfg["dataset"], args.seed)
    proto = EvalProtocol(channel=args.channel, border_crop=scale)
    rows = []
    want_sigma = model.has_sigma_branch
    for name, hr, lr in zip(dataset.names, dataset.hr, dataset.lr):
        mu, sigma = _sr_for_image(model, lr, want_sigma)
        row = {
            "image": name,
            "psnr": psnr(mu, hr, proto),
            "ssim": ssim(mu, hr, proto),
            "pll": float("nan"),
            "residual_psnr": float("nan"),
        }
        bicubic = bicubic_resize(lr, scale, "up")
        row["psnr_bicubic"] = psnr(bicubic, hr, proto)
        if sigma is not None:
            resid = Image(np.abs(hr.values - mu.values))
            row["pll"] = pll(mu, sigma, hr)
            row["residual_psnr"] = residual_psnr(sigma, resid)
        rows.append(row)
    csv_path = out / "eval.csv"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image,psnr,ssim,pll,residual_psnr\n")
        for r in rows:
            fh.write(f"{r['image']},{r['psnr']!r},{r['ssim']!r},{r['pll']!r},{r['residual_psnr']!r}\n")
    baseline_path = out / "baseline.csv"
    with open(baseline_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("image,psnr_bicubic\n")
        for r in rows:
            fh.write(f"{r['image']},{r['psnr_bicubic']!r}\n")
    mean_psnr = float(np.mean([r["psnr"] for r in rows]))
    mean_bicubic = float(np.mean([r["psnr_bicubic"] for r in rows]))
    print(f"images: {len(rows)}  mean psnr: {mean_psnr:.4f} dB  bicubic: {mean_bicubic:.4f} dB")
    print(f"report: {csv_path}")
    return 0


def cmd_analyze(args):
    rng = Rng(args.seed)
    out = args.out
    Path(out).mkdir(parents=True, exist_ok=True)
    if args.experiment == "gradient-sign":
        report = gradient_sign_experiment(args.n or 10000, rng, out_dir=out)
    elif args.experiment == "gradient-magnitude":
        report = gradient_magnitude_experiment(args.n or 1000000, rng, out_dir=out)
    elif args.experiment == "jensen":
        report = jensen_experiment(rng=rng, n_mc=args.n or 200000, out_dir=out)
    else:
        report = sigma_degradation_experiment(rng=rng, out_dir=out)
    print(report.summary())
    print(f"csv: {report.csv_path}")
    return 0 if report.passed else 1


def cmd_uncertainty(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    if not model.has_sigma_branch:
        print("error: checkpoint has no sigma branch", file=sys.stderr)
        return 1
    lr_image = load_pnm(args.input)
    mu, sigma = _sr_for_image(model, lr_image, want_sigma=True)
    save_pnm(mu, out / "sr.ppm")
    # dark = high uncertainty
    sigma_gray = Image(1.0 - sigma.values.mean(axis=2, keepdims=True))
    save_pnm(sigma_gray, out / "sigma.pgm")
    print(f"sr: {out / 'sr.ppm'}")
    print(f"sigma map: {out / 'sigma.pgm'} (dark = high uncertainty)")
    if args.hr:
        hr = load_pnm(args.hr)
        if (hr.height, hr.width) != (mu.height, mu.width):
            print("error: HR image does not match SR dimensions", file=sys.stderr)
            return 1
        resid = Image(np.abs(hr.values - mu.values))
        resid_gray = Image(1.0 - resid.values.mean(axis=2, keepdims=True))
        save_pnm(resid_gray, out / "residual.pgm")
        rp = residual_psnr(sigma, resid)
        print(f"residual map: {out / 'residual.pgm'}")
        print(f"residual_psnr: {rp!r}")
    return 0


def make_parser():
    p = argparse.ArgumentParser(prog="stochsr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="config file path")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default="run", help="output directory")

    pt = sub.add_parser("train", parents=[common], help="train a model")
    pt.add_argument("--loss", default=None, choices=["l1", "l2", "trainable_sigma", "constant_sigma", "data_adaptive"])
    pt.set_defaults(fn=cmd_train)

    pe = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--channel", default="y", choices=["y", "rgb"])
    pe.set_defaults(fn=cmd_eval)

    pa = sub.add_parser("analyze", parents=[common], help="run a property experiment")
    pa.add_argument("experiment", choices=list(EXPERIMENTS))
    pa.add_argument("-n", type=int, default=None, help="case/draw count")
    pa.set_defaults(fn=cmd_analyze, out="reports")

    pu = sub.add_parser("uncertainty", parents=[common], help="emit SR, sigma, residual maps")
    pu.add_argument("--checkpoint", required=True)
    pu.add_argument("--input", required=True, help="LR image (PNM)")
    pu.add_argument("--hr", default=None, help="optional HR image (PNM)")
    pu.set_defaults(fn=cmd_uncertainty)
    return p


def main(argv=None):
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
