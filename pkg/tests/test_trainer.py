import numpy as np
import pytest

from stochsr.autodiff import Tensor
from stochsr.data import PairedDataset
from stochsr.distributions import Rng
from stochsr.losses import LossSpec
from stochsr.models import SigmaBranchConfig, TrunkConfig, build_model
from stochsr.trainer import (
    AdamState,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    lr_at,
    train,
)


def desk_cfg(**kwargs):
    defaults = dict(
        loss=LossSpec(variant="l1"),
        batch=2,
        patch=6,
        lr0=1e-3,
        halve_every=50,
        total_iters=100,
        seed=3,
        telemetry_every=10,
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


def tiny_model(seed=0, sigma=True):
    return build_model(
        TrunkConfig(feature_channels=4, n_resblocks=1, scale=2),
        SigmaBranchConfig(channels=4, n_blocks=2) if sigma else None,
        Rng(seed),
    )


class TestLrSchedule:
    def test_initial(self):
        cfg = TrainConfig(lr0=1e-4, halve_every=200000)
        assert lr_at(0, cfg) == 1e-4

    def test_first_halving(self):
        cfg = TrainConfig(lr0=1e-4, halve_every=200000)
        assert lr_at(200000, cfg) == 5e-5

    def test_second_halving(self):
        cfg = TrainConfig(lr0=1e-4, halve_every=200000)
        assert lr_at(400000, cfg) == 2.5e-5

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            lr_at(-1, TrainConfig())


class TestAdam:
    def test_first_step_magnitude(self):
        p = Tensor(0.0, requires_grad=True)
        p.grad = np.asarray(1.0)
        params = {"p": p}
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.01)
        # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
        assert float(p.values) == pytest.approx(-0.01, abs=1e-8)

    def test_zero_gradient_no_move(self):
        p = Tensor(5.0, requires_grad=True)
        p.grad = np.asarray(0.0)
        params = {"p": p}
        adam_step(params, AdamState.for_params(params), lr=0.1)
        assert float(p.values) == 5.0

    def test_constant_gradient_monotone(self):
        p = Tensor(0.0, requires_grad=True)
        params = {"p": p}
        state = AdamState.for_params(params)
        values = [float(p.values)]
        for _ in range(5):
            p.grad = np.asarray(2.0)
            adam_step(params, state, lr=0.01)
            values.append(float(p.values))
        assert all(b < a for a, b in zip(values, values[1:]))

    def test_missing_grad_skipped(self):
        p = Tensor(1.0, requires_grad=True)
        params = {"p": p}
        adam_step(params, AdamState.for_params(params), lr=0.1)
        assert float(p.values) == 1.0

    def test_non_finite_gradient_aborts(self):
        p = Tensor(0.0, requires_grad=True)
        p.grad = np.asarray(np.inf)
        with pytest.raises(TrainingDiverged, match="p"):
            adam_step({"p": p}, AdamState.for_params({"p": p}), lr=0.1)


class TestTrainLoop:
    def test_l1_descends_on_single_image(self):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        model = tiny_model(sigma=False)
        report = train(model, ds, desk_cfg(total_iters=200, halve_every=100))
        first = report.telemetry[0]["loss"]
        last = report.telemetry[-1]["loss"]
        assert last < first

    def test_identical_seeds_identical_telemetry(self):
        ds1 = PairedDataset.synthetic(2, 32, 2, Rng(1))
        ds2 = PairedDataset.synthetic(2, 32, 2, Rng(1))
        r1 = train(tiny_model(1), ds1, desk_cfg())
        r2 = train(tiny_model(1), ds2, desk_cfg())
        assert r1.telemetry == r2.telemetry

    def test_parameters_bitwise_reproducible(self):
        ds = PairedDataset.synthetic(2, 32, 2, Rng(1))
        m1, m2 = tiny_model(1), tiny_model(1)
        train(m1, ds, desk_cfg())
        train(m2, ds, desk_cfg())
        for k in m1.params:
            np.testing.assert_array_equal(m1.params[k].values, m2.params[k].values)

    def test_telemetry_and_checkpoints_written(self, tmp_path):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        report = train(tiny_model(), ds, desk_cfg(), out_dir=tmp_path)
        assert (tmp_path / "telemetry.csv").exists()
        lines = (tmp_path / "telemetry.csv").read_text().splitlines()
        assert lines[0].startswith("# variant=l1")
        assert lines[1] == "iter,loss,mean_sigma,lr,wall_ms"
        # halving boundaries 50 and 100 produce checkpoints
        names = sorted(p.name for p in tmp_path.glob("ckpt_*.bin"))
        assert names == ["ckpt_0000050.bin", "ckpt_0000100.bin"]
        assert report.checkpoints

    def test_wall_ms_zero_by_default(self, tmp_path):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        report = train(tiny_model(), ds, desk_cfg(total_iters=10, halve_every=10))
        assert all(row["wall_ms"] == 0.0 for row in report.telemetry)

    def test_sigma_telemetry_present_for_branch_variants(self):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        cfg = desk_cfg(loss=LossSpec(variant="trainable_sigma"), total_iters=20, halve_every=20)
        report = train(tiny_model(), ds, cfg)
        assert all(0.0 < row["mean_sigma"] < 1.0 for row in report.telemetry)

    def test_trainable_sigma_requires_branch(self):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        cfg = desk_cfg(loss=LossSpec(variant="trainable_sigma"), total_iters=5)
        with pytest.raises(ValueError, match="sigma branch"):
            train(tiny_model(sigma=False), ds, cfg)

    def test_empty_dataset_rejected(self):
        ds = PairedDataset([], [], 2)
        with pytest.raises(ValueError, match="empty"):
            train(tiny_model(), ds, desk_cfg())

    def test_warm_start_freezes_sigma(self):
        ds = PairedDataset.synthetic(1, 32, 2, Rng(0))
        cfg = desk_cfg(
            loss=LossSpec(variant="data_adaptive", beta=0.01),
            total_iters=20,
            halve_every=20,
            sigma_warm_start=20,
        )
        model = tiny_model()
        before = {k: p.values.copy() for k, p in model.sigma_parameters().items()}
        train(model, ds, cfg)
        for k, p in model.sigma_parameters().items():
            np.testing.assert_array_equal(p.values, before[k])

    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(batch=0)
        with pytest.raises(ValueError):
            TrainConfig(beta1=1.0)
        with pytest.raises(ValueError):
            TrainConfig(lr0=0.0)
