"""Metrics against loop oracles and anchor values; loss terms, variant
masking, and the feature extractor contract."""

import numpy as np
import pytest

from starnet.autodiff import ContractViolation, Tensor
from starnet.losses import (FeatureExtractor, LossTargets, LossWeights,
                            VariantSpec, feature_loss, flow_refine_loss,
                            l1_loss, loss_f, loss_r)
from starnet.metrics import PSNR_CAP_DB, interp_error, psnr, ssim
from starnet.model import ModelConfig, Starnet
from test_model import toy_inputs


def ssim_oracle(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window loop implementation on luma."""
    def lum(x):
        return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
    a = lum(a.astype(np.float64))
    b = lum(b.astype(np.float64))
    x = np.arange(window) - (window - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    k = np.outer(g, g)
    k /= k.sum()
    c1, c2 = k1 * k1, k2 * k2
    h, w = a.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            wa = a[i:i + window, j:j + window]
            wb = b[i:i + window, j:j + window]
            mu1 = np.sum(k * wa)
            mu2 = np.sum(k * wb)
            s11 = np.sum(k * wa * wa) - mu1 * mu1
            s22 = np.sum(k * wb * wb) - mu2 * mu2
            s12 = np.sum(k * wa * wb) - mu1 * mu2
            vals.append(((2 * mu1 * mu2 + c1) * (2 * s12 + c2))
                        / ((mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)))
    return float(np.mean(vals))


class TestAnchors:
    def test_psnr_uniform_half(self):
        a = np.zeros((8, 8, 3), np.float32)
        b = np.full((8, 8, 3), 0.5, np.float32)
        assert abs(psnr(a, b) - 6.0206) < 1e-3

    def test_psnr_identical_capped(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert psnr(img, img) == PSNR_CAP_DB

    def test_psnr_monotone_in_error_scale(self, rng):
        gt = rng.random((8, 8, 3)).astype(np.float32)
        err = rng.standard_normal(gt.shape).astype(np.float32) * 0.05
        assert psnr(gt + err, gt) > psnr(gt + 1.5 * err, gt)

    def test_ssim_identical_is_one(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_ssim_symmetric(self, rng):
        a = rng.random((16, 16, 3)).astype(np.float32)
        b = rng.random((16, 16, 3)).astype(np.float32)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_ssim_small_image_rejected(self, rng):
        with pytest.raises(ContractViolation):
            ssim(rng.random((8, 8, 3)), rng.random((8, 8, 3)))

    def test_ie_identical_zero(self, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        assert interp_error(img, img) == 0.0

    def test_ie_uniform_two_levels(self):
        a = np.zeros((8, 8, 3), np.float32)
        b = np.full((8, 8, 3), 2.0 / 255.0, np.float32)
        assert interp_error(a, b) == pytest.approx(2.0, abs=1e-6)


class TestOracles:
    def test_ssim_matches_loop_oracle(self, rng):
        a = rng.random((16, 18, 3)).astype(np.float32)
        b = np.clip(a + rng.standard_normal(a.shape) * 0.1, 0, 1).astype(np.float32)
        assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), abs=1e-4)

    def test_ie_matches_loop_oracle(self, rng):
        a = rng.random((10, 10, 3))
        b = rng.random((10, 10, 3))
        lum = lambda x: 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]
        want = np.sqrt(np.mean((255 * (lum(a) - lum(b))) ** 2))
        assert interp_error(a, b) == pytest.approx(want, abs=1e-4)

    def test_l1_per_sample_mean_summed_over_batch(self, rng):
        a = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        b = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        want = sum(np.mean(np.abs(a[i] - b[i])) for i in range(3))
        got = float(l1_loss(Tensor(a), Tensor(b)).data)
        assert got == pytest.approx(want, rel=1e-5)


class TestLossTerms:
    def test_l1_zero_at_equal(self, rng):
        a = Tensor(rng.random((2, 3, 4, 4)).astype(np.float32))
        assert float(l1_loss(a, Tensor(a.data.copy())).data) == 0.0

    def test_feature_loss_zero_at_equal(self, rng):
        fx = FeatureExtractor(0)
        img = rng.random((1, 3, 32, 32)).astype(np.float32)
        assert float(feature_loss(Tensor(img), Tensor(img.copy()), fx).data) == 0.0

    def test_feature_extractor_frozen(self, rng):
        fx = FeatureExtractor(0)
        img = Tensor(rng.random((1, 3, 32, 32)).astype(np.float32),
                     requires_grad=True)
        feature_loss(img, Tensor(rng.random((1, 3, 32, 32)).astype(np.float32)),
                     fx).backward()
        assert img.grad is not None
        assert all(w.grad is None and b.grad is None for w, b in fx.layers)

    def test_feature_extractor_reduces_32x(self, rng):
        fx = FeatureExtractor(0)
        out = fx(rng.random((1, 3, 64, 64)).astype(np.float32))
        assert out.shape[2:] == (2, 2)
        with pytest.raises(ContractViolation):
            fx(rng.random((1, 3, 16, 16)).astype(np.float32))

    def test_flow_loss_zero_at_exact_composition(self, rng):
        t_tn = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        tn_t1 = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        t1_tn = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        tn_t = rng.standard_normal((1, 2, 6, 6)).astype(np.float32)
        loss = flow_refine_loss(Tensor(t_tn + tn_t1), Tensor(t1_tn + tn_t),
                                t_tn, tn_t1, t1_tn, tn_t)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_flow_loss_mean_normalized(self, rng):
        z = np.zeros((1, 2, 4, 4), np.float32)
        hat = np.full((1, 2, 4, 4), 2.0, np.float32)
        loss = flow_refine_loss(Tensor(hat), Tensor(z), z, z, z, z)
        assert float(loss.data) == pytest.approx(4.0, rel=1e-6)

    def test_negative_weights_rejected(self):
        with pytest.raises(ContractViolation):
            LossWeights(w1=-1.0)


@pytest.fixture(scope="module")
def toy_run():
    rng = np.random.default_rng(11)
    model = Starnet(ModelConfig(c_h=8, c_l=8, seed=0))
    I_t, I_t1, F_fwd, F_bwd = toy_inputs(rng, h=8, w=8)
    out = model.full_forward(I_t, I_t1, F_fwd, F_bwd)
    s = 4
    targets = LossTargets(
        hr_t=rng.random((1, 3, 8 * s, 8 * s)).astype(np.float32),
        hr_tn=rng.random((1, 3, 8 * s, 8 * s)).astype(np.float32),
        hr_t1=rng.random((1, 3, 8 * s, 8 * s)).astype(np.float32),
        lr_tn=rng.random((1, 3, 8, 8)).astype(np.float32),
        f_t_tn=F_fwd * 0.5, f_tn_t1=F_fwd * 0.5,
        f_t1_tn=F_bwd * 0.5, f_tn_t=F_bwd * 0.5)
    return model, out, targets


class TestVariants:
    def test_loss_f_reduces_to_loss_r_at_w3_zero(self, toy_run):
        model, out, targets = toy_run
        w = LossWeights(w3=0.0)
        fx = FeatureExtractor(0)
        v = VariantSpec("STAR")
        assert float(loss_f(out, targets, w, v, fx).data) == \
            pytest.approx(float(loss_r(out, targets, w, v).data), rel=1e-6)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ContractViolation):
            VariantSpec("STAR_X")

    def test_input_grid_per_variant(self):
        assert VariantSpec("STAR_T_HR").input_grid == "hr"
        for name in ("STAR", "STAR_ST", "STAR_S", "STAR_T_LR"):
            assert VariantSpec(name).input_grid == "lr"

    @pytest.mark.parametrize("name,zeroed,active", [
        ("STAR_S", "net_rec.lr.weight", "net_rec.hr.weight"),
        ("STAR_T_LR", "net_rec.hr.weight", "net_rec.lr.weight"),
    ])
    def test_gradient_masking(self, name, zeroed, active):
        """Heads feeding only inactive outputs get exactly zero gradient."""
        rng = np.random.default_rng(2)
        model = Starnet(ModelConfig(c_h=8, c_l=8, seed=0))
        I_t, I_t1, F_fwd, F_bwd = toy_inputs(rng, h=8, w=8)
        out = model.full_forward(I_t, I_t1, F_fwd, F_bwd)
        targets = LossTargets(
            hr_t=rng.random((1, 3, 32, 32)).astype(np.float32),
            hr_tn=rng.random((1, 3, 32, 32)).astype(np.float32),
            hr_t1=rng.random((1, 3, 32, 32)).astype(np.float32),
            lr_tn=rng.random((1, 3, 8, 8)).astype(np.float32))
        loss_r(out, targets, LossWeights(), VariantSpec(name)).backward()
        params = {p.name: p for _, p in model.named_parameters()}
        g = params[zeroed].grad
        assert g is None or not np.any(g)
        assert np.any(params[active].grad)

    def test_all_variants_nonnegative_loss(self, toy_run):
        model, out, targets = toy_run
        for name in ("STAR", "STAR_ST", "STAR_S", "STAR_T_LR"):
            val = float(loss_r(out, targets, LossWeights(), VariantSpec(name)).data)
            assert val >= 0.0

    def test_missing_target_rejected(self, toy_run):
        model, out, _ = toy_run
        with pytest.raises(ContractViolation):
            loss_r(out, LossTargets(), LossWeights(), VariantSpec("STAR"))
