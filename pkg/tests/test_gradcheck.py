"""Finite-difference gradient verification: trusted-step machinery, a
passing run on a toy model, and detection of a deliberately corrupted
backward pass."""

import numpy as np
import pytest

from starnet.autodiff import ContractViolation
from starnet.gradcheck import (EPS_LADDER, _smooth_field, _trusted_fd,
                               gradcheck, make_probe_batch)
from starnet.model import GROUP_NAMES, ModelConfig, Starnet

TOY = ModelConfig(c_h=8, c_l=8, seed=0)


class TestProbeBatch:
    def test_shapes_and_dtype(self):
        inputs, targets = make_probe_batch(TOY, lr_size=(8, 8))
        assert inputs["I_t"].shape == (1, 3, 8, 8)
        assert inputs["I_t"].dtype == np.float64
        assert targets.hr_tn.shape == (1, 3, 32, 32)

    def test_smooth_field_in_unit_range(self, rng):
        f = _smooth_field(rng, (2, 16, 16))
        assert f.min() >= 0.0 and f.max() <= 1.0
        # band-limited: neighbor differences well below the full range
        assert np.abs(np.diff(f, axis=-1)).max() < 0.5


class TestTrustedFD:
    def test_smooth_function_recovers_derivative(self):
        x = np.array([0.3])
        fd = _trusted_fd(lambda: float(np.sin(x[0])), np.sin(0.3), x, 0)
        assert fd == pytest.approx(np.cos(0.3), rel=1e-5)

    def test_kink_at_point_excluded(self):
        # |x| at 0: every central difference returns 0, the two-sided
        # average, but the one-sided halves disagree at every step size
        x = np.array([0.0])
        fd = _trusted_fd(lambda: abs(x[0]), 0.0, x, 0)
        assert fd is None

    def test_kink_inside_coarse_steps_only(self):
        # |x - d| with d below the finest ladder step: no rung ever sees
        # agreement between the one-sided halves
        d = EPS_LADDER[-1] / 4
        x = np.array([0.0])
        fd = _trusted_fd(lambda: abs(x[0] - d), d, x, 0)
        assert fd is None


class _ScaledGradParam:
    """Stand-in that reports a wrongly scaled analytic gradient while
    leaving the forward computation untouched."""

    def __init__(self, real, factor):
        self._real = real
        self._factor = factor

    @property
    def data(self):
        return self._real.data

    @property
    def grad(self):
        g = self._real.grad
        return None if g is None else g * self._factor

    @property
    def name(self):
        return self._real.name

    def zero_grad(self):
        self._real.zero_grad()


class TestGradcheck:
    def test_toy_model_passes(self):
        report = gradcheck(cfg=TOY, loss_kind="L_r", coords_per_group=2,
                           lr_size=(8, 8), seed=0)
        assert report["passed"]
        assert report["max_rel"] <= 1e-3
        assert set(report["per_group"]) == set(GROUP_NAMES)
        assert report["coords_checked"] >= 14

    def test_float32_model_rejected(self):
        with pytest.raises(ContractViolation):
            gradcheck(model=Starnet(TOY))

    def test_needs_config_or_model(self):
        with pytest.raises(ContractViolation):
            gradcheck()

    def test_corrupted_gradient_detected_and_localized(self):
        model = Starnet(TOY, dtype=np.float64)
        group = model.groups["theta_d"]
        for pname in group:
            group[pname] = _ScaledGradParam(group[pname], 1.05)
        report = gradcheck(model=model, loss_kind="L_r", coords_per_group=2,
                           lr_size=(8, 8), seed=0)
        assert not report["passed"]
        bad = {g for g, v in report["per_group"].items()
               if v["max_rel"] > report["tol"]}
        assert bad == {"theta_d"}
