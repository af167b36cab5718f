import numpy as np
import pytest

from stochsr.autodiff import Tensor, backward
from stochsr.distributions import Rng
from stochsr.losses import LossSpec, combined_objective, data_adaptive_loss
from stochsr.models import (
    SigmaBranchConfig,
    TrunkConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)

from conftest import fd_grad, rel_err


def conv_params(c_in, c_out, k=3):
    return c_out * c_in * k * k + c_out


class TestBuild:
    def test_parameter_count_closed_form(self):
        model = build_model(
            TrunkConfig(feature_channels=8, n_resblocks=1, scale=2),
            SigmaBranchConfig(channels=8, n_blocks=4),
            Rng(0),
        )
        expected = (
            conv_params(3, 8)                # head
            + 2 * conv_params(8, 8)          # one residual block
            + conv_params(8, 8 * 4)          # upsampler expansion (scale 2)
            + conv_params(8, 3)              # output conv
            + 4 * (conv_params(8, 8) + 1)    # sigma blocks with PReLU slopes
            + conv_params(8, 8 * 4)          # sigma upsampler
            + conv_params(8, 3)              # sigma output conv
        )
        assert model.parameter_count() == expected

    def test_same_seed_same_parameters(self):
        a = build_model(TrunkConfig(), SigmaBranchConfig(channels=4), Rng(5))
        b = build_model(TrunkConfig(), SigmaBranchConfig(channels=4), Rng(5))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].values, b.params[k].values)

    def test_different_seed_differs(self):
        a = build_model(TrunkConfig(), None, Rng(5))
        b = build_model(TrunkConfig(), None, Rng(6))
        assert any(not np.array_equal(a.params[k].values, b.params[k].values) for k in a.params)

    def test_mu_only_model(self):
        model = build_model(TrunkConfig(), None, Rng(0))
        assert not model.has_sigma_branch
        assert not model.sigma_parameters()
        with pytest.raises(ValueError, match="no sigma branch"):
            model.forward(Tensor(np.zeros((1, 3, 4, 4))), want_sigma=True)

    def test_init_ranges(self):
        model = build_model(TrunkConfig(feature_channels=4), SigmaBranchConfig(channels=4), Rng(1))
        w = model.params["trunk.head.w"].values
        bound = 1.0 / np.sqrt(3 * 9)
        assert np.all(np.abs(w) <= bound)
        np.testing.assert_array_equal(model.params["trunk.head.b"].values, np.zeros(4))
        assert float(model.params["sigma.block0.slope"].values) == 0.25

    def test_invalid_configs(self):
        with pytest.raises(ValueError):
            TrunkConfig(scale=5)
        with pytest.raises(ValueError):
            SigmaBranchConfig(kernel=4)
        with pytest.raises(ValueError):
            SigmaBranchConfig(tap="nowhere")


class TestForward:
    def test_output_shapes(self):
        model = build_model(
            TrunkConfig(feature_channels=4, n_resblocks=1, scale=2),
            SigmaBranchConfig(channels=4),
            Rng(0),
        )
        x = Tensor(np.random.default_rng(0).uniform(0, 1, (1, 3, 8, 8)))
        mu, sigma = model.forward(x, want_sigma=True)
        assert mu.shape == (1, 3, 16, 16)
        assert sigma.shape == (1, 3, 16, 16)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_scales(self, scale):
        model = build_model(TrunkConfig(feature_channels=4, scale=scale), None, Rng(0))
        mu, _ = model.forward(Tensor(np.zeros((2, 3, 5, 6))))
        assert mu.shape == (2, 3, 5 * scale, 6 * scale)

    def test_sigma_in_unit_interval(self):
        model = build_model(TrunkConfig(feature_channels=4), SigmaBranchConfig(channels=4), Rng(2))
        _, sigma = model.forward(Tensor(np.random.default_rng(1).uniform(0, 1, (1, 3, 6, 6))), want_sigma=True)
        assert np.all(sigma.values > 0) and np.all(sigma.values < 1)

    def test_sigma_branch_lazy(self):
        model = build_model(TrunkConfig(feature_channels=4), SigmaBranchConfig(channels=4), Rng(0))
        x = Tensor(np.zeros((1, 3, 4, 4)))
        for _ in range(3):
            model.forward(x)
        assert model.mu_forwards == 3
        assert model.sigma_forwards == 0

    def test_deterministic_forward(self):
        model = build_model(TrunkConfig(feature_channels=4), SigmaBranchConfig(channels=4), Rng(0))
        x = Tensor(np.random.default_rng(2).uniform(0, 1, (1, 3, 6, 6)))
        a, sa = model.forward(x, want_sigma=True)
        b, sb = model.forward(x, want_sigma=True)
        np.testing.assert_array_equal(a.values, b.values)
        np.testing.assert_array_equal(sa.values, sb.values)

    def test_bad_input_raises(self):
        model = build_model(TrunkConfig(), None, Rng(0))
        with pytest.raises(ValueError):
            model.forward(Tensor(np.zeros((3, 4, 4))))
        with pytest.raises(ValueError):
            model.forward(Tensor(np.zeros((1, 1, 4, 4))))

    def test_lr_input_tap(self):
        model = build_model(
            TrunkConfig(feature_channels=4),
            SigmaBranchConfig(channels=4, tap="lr_input"),
            Rng(0),
        )
        assert model.params["sigma.block0.w"].shape == (4, 3, 3, 3)
        _, sigma = model.forward(Tensor(np.zeros((1, 3, 4, 4))), want_sigma=True)
        assert sigma.shape == (1, 3, 8, 8)


class TestGradients:
    def test_micro_model_matches_finite_differences(self):
        """Combined objective vs central differences on every parameter.

        Trunk parameters are checked against the data-adaptive term alone
        (the auxiliary term holds mu detached by construction), sigma
        parameters against the full combined objective.
        """
        rng = Rng(77)
        model = build_model(
            TrunkConfig(feature_channels=2, n_resblocks=1, scale=2),
            SigmaBranchConfig(channels=2, n_blocks=2),
            rng,
        )
        x = rng.uniform(0.1, 0.9, (1, 3, 4, 4))
        target = rng.uniform(0.1, 0.9, (1, 3, 8, 8))
        z = rng.standard_normal((1, 3, 8, 8))
        spec = LossSpec(beta=0.05, threshold_aux=False)

        mu, sigma = model.forward(Tensor(x), want_sigma=True)
        backward(combined_objective(mu, sigma, Tensor(target), z, spec))
        grads = {k: p.grad.copy() for k, p in model.params.items() if p.grad is not None}
        model.zero_grad()

        def da_loss():
            m, _ = model.forward(Tensor(x))
            return data_adaptive_loss(m, Tensor(target), z, spec).item()

        def full_loss():
            m, s = model.forward(Tensor(x), want_sigma=True)
            return combined_objective(m, s, Tensor(target), z, spec).item()

        for name, p in model.trunk_parameters().items():
            want = fd_grad(da_loss, p.values, h=1e-6)
            assert rel_err(grads[name], want) < 1e-3, name
        for name, p in model.sigma_parameters().items():
            want = fd_grad(full_loss, p.values, h=1e-6)
            assert rel_err(grads[name], want) < 1e-3, name


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        model = build_model(TrunkConfig(feature_channels=4), SigmaBranchConfig(channels=4), Rng(9))
        path = tmp_path / "model.bin"
        manifest = save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.trunk == model.trunk
        assert loaded.sigma == model.sigma
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k].values, model.params[k].values)
        lines = open(manifest).read().splitlines()
        assert len(lines) == len(model.params)
        assert lines[0].split("\t")[0] == "trunk.head.w"

    def test_mu_only_roundtrip(self, tmp_path):
        model = build_model(TrunkConfig(feature_channels=4), None, Rng(9))
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        assert not load_checkpoint(path).has_sigma_branch

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        model = build_model(TrunkConfig(feature_channels=4), None, Rng(9))
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(path)

    def test_manifest_mismatch_detected(self, tmp_path):
        model = build_model(TrunkConfig(feature_channels=4), None, Rng(9))
        path = tmp_path / "model.bin"
        manifest = save_checkpoint(model, path)
        text = open(manifest).read().replace("trunk.head.w", "trunk.head.x")
        open(manifest, "w").write(text)
        with pytest.raises(ValueError, match="manifest"):
            load_checkpoint(path)
