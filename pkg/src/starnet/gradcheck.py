"""Finite-difference verification of the analytic gradients.

The whole network is piecewise linear in any single parameter coordinate
(every nonlinearity is a ReLU/PReLU/abs gate), so a central difference is
exact for the loss unless the probe interval crosses a gate boundary.
Each coordinate is therefore probed at a shrinking ladder of step sizes;
the finite difference is trusted once two adjacent steps agree, and the
rare coordinate where no step in the ladder stabilizes is excluded and
counted rather than compared against a meaningless number.
"""

from __future__ import annotations

import numpy as np

from .autodiff import ContractViolation
from .losses import (FeatureExtractor, LossTargets, LossWeights, VariantSpec,
                     loss_f, loss_r)
from .model import GROUP_NAMES, ModelConfig, Starnet
from .optim import zero_grad

EPS_LADDER = (1e-3, 1e-4, 1e-5, 1e-6, 1e-7)
FD_AGREE_RTOL = 1e-4


def _smooth_field(rng, shape, octaves=3):
    """Band-limited random field in [0,1]; gives informative gradients."""
    h, w = shape[-2:]
    out = np.zeros(shape)
    for k in range(octaves):
        step = 2 ** (octaves - k)
        small = rng.standard_normal(shape[:-2] + ((h - 1) // step + 2,
                                                  (w - 1) // step + 2))
        rows = np.linspace(0, small.shape[-2] - 1.001, h)
        cols = np.linspace(0, small.shape[-1] - 1.001, w)
        r0 = rows.astype(int); c0 = cols.astype(int)
        fr = (rows - r0)[:, None]; fc = (cols - c0)[None, :]
        a = small[..., r0, :][..., :, c0]
        b = small[..., r0, :][..., :, c0 + 1]
        c = small[..., r0 + 1, :][..., :, c0]
        d = small[..., r0 + 1, :][..., :, c0 + 1]
        out += ((a * (1 - fr) * (1 - fc) + b * (1 - fr) * fc
                 + c * fr * (1 - fc) + d * fr * fc) / 2 ** k)
    lo, hi = out.min(), out.max()
    return ((out - lo) / (hi - lo + 1e-12)).astype(np.float64)


def make_probe_batch(cfg: ModelConfig, lr_size=(16, 16), batch=1, seed=1234):
    """Synthetic inputs and targets on the toy geometry, float64."""
    rng = np.random.default_rng(seed)
    h, w = lr_size
    s = cfg.scale
    inputs = {
        "I_t": _smooth_field(rng, (batch, 3, h, w)),
        "I_t1": _smooth_field(rng, (batch, 3, h, w)),
        "F_fwd": rng.standard_normal((batch, 2, h, w)) * 0.5,
        "F_bwd": rng.standard_normal((batch, 2, h, w)) * 0.5,
    }
    targets = LossTargets(
        hr_t=_smooth_field(rng, (batch, 3, h * s, w * s)),
        hr_tn=_smooth_field(rng, (batch, 3, h * s, w * s)),
        hr_t1=_smooth_field(rng, (batch, 3, h * s, w * s)),
        lr_tn=_smooth_field(rng, (batch, 3, h, w)),
        f_t_tn=rng.standard_normal((batch, 2, h, w)) * 0.25,
        f_tn_t1=rng.standard_normal((batch, 2, h, w)) * 0.25,
        f_t1_tn=rng.standard_normal((batch, 2, h, w)) * 0.25,
        f_tn_t=rng.standard_normal((batch, 2, h, w)) * 0.25,
    )
    return inputs, targets


def _agree(a, b, rtol=FD_AGREE_RTOL):
    return abs(a - b) <= rtol * max(abs(a), abs(b), 1e-6)


def _trusted_fd(loss_fn, base, flat, i):
    """Walk the step-size ladder until two adjacent central estimates agree.

    A kink closer to the point than the smallest step makes every central
    difference converge to the two-sided average, which no step-size test
    can see; the forward/backward one-sided split catches that case, so an
    estimate is only trusted when both one-sided halves match too.
    """
    prev = None
    for eps in EPS_LADDER:
        old = flat[i]
        flat[i] = old + eps
        lp = loss_fn()
        flat[i] = old - eps
        lm = loss_fn()
        flat[i] = old
        central = (lp - lm) / (2.0 * eps)
        sided_ok = _agree((lp - base) / eps, (base - lm) / eps)
        if prev is not None and sided_ok and _agree(central, prev):
            return central
        prev = central if sided_ok else None
    return None


def gradcheck(cfg: ModelConfig = None, model: Starnet = None,
              loss_kind: str = "L_r", coords_per_group: int = 13,
              tol: float = 1e-3, seed: int = 0, lr_size=(16, 16),
              weights: LossWeights = None, log=None) -> dict:
    """Compare analytic gradients against trusted finite differences on a
    random sample of coordinates from every parameter group."""
    if model is None:
        if cfg is None:
            raise ContractViolation("gradcheck needs a config or a model")
        model = Starnet(cfg, dtype=np.float64)
    elif model.dtype != np.float64:
        raise ContractViolation("gradcheck requires a float64 model")
    cfg = model.cfg
    weights = weights or LossWeights()
    variant = VariantSpec("STAR")
    fx = FeatureExtractor(cfg.seed, dtype=np.float64) if loss_kind == "L_f" else None
    inputs, targets = make_probe_batch(cfg, lr_size=lr_size, seed=seed + 1)

    def loss_value() -> float:
        out = model.full_forward(inputs["I_t"], inputs["I_t1"],
                                 inputs["F_fwd"], inputs["F_bwd"])
        if loss_kind == "L_f":
            return float(loss_f(out, targets, weights, variant, fx).data)
        return float(loss_r(out, targets, weights, variant).data)

    params = list(model.parameters())
    zero_grad(params)
    out = model.full_forward(inputs["I_t"], inputs["I_t1"],
                             inputs["F_fwd"], inputs["F_bwd"])
    if loss_kind == "L_f":
        loss = loss_f(out, targets, weights, variant, fx)
    else:
        loss = loss_r(out, targets, weights, variant)
    loss.backward()
    base = float(loss.data)

    rng = np.random.default_rng(seed)
    per_group = {}
    excluded = 0
    checked = 0
    for group in GROUP_NAMES:
        group_params = list(model.groups[group].values())
        if not group_params:
            per_group[group] = {"max_rel": 0.0, "checked": 0, "excluded": 0}
            continue
        sizes = np.array([p.data.size for p in group_params])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        picks = rng.choice(int(offsets[-1]),
                           size=min(coords_per_group, int(offsets[-1])),
                           replace=False)
        worst = 0.0
        g_checked = 0
        g_excluded = 0
        for flat_idx in picks:
            pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
            p = group_params[pi]
            i = int(flat_idx - offsets[pi])
            flat = p.data.reshape(-1)
            analytic = float(p.grad.reshape(-1)[i])
            fd = _trusted_fd(loss_value, base, flat, i)
            if fd is None:
                g_excluded += 1
                continue
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
            worst = max(worst, rel)
            g_checked += 1
        per_group[group] = {"max_rel": worst, "checked": g_checked,
                            "excluded": g_excluded}
        excluded += g_excluded
        checked += g_checked
        if log:
            log(f"{group:<10} checked {g_checked:3d} excluded {g_excluded}"
                f"  max rel err {worst:.3e}")
    max_rel = max(v["max_rel"] for v in per_group.values())
    report = {"loss_kind": loss_kind, "coords_checked": checked,
              "excluded_nonsmooth": excluded, "per_group": per_group,
              "max_rel": max_rel, "tol": tol, "passed": bool(max_rel <= tol)}
    if log:
        log(f"{loss_kind}: max rel err {max_rel:.3e} over {checked} coords "
            f"({excluded} excluded as nonsmooth) -> "
            f"{'PASS' if report['passed'] else 'FAIL'}")
    return report
