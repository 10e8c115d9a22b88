"""End-to-end acceptance gate.

Each test checks one release criterion at its stated tolerance and prints a
single [PASS]/[FAIL] line. The training-based criteria (overfit smoke test,
ablation ordering) run real optimization and dominate the runtime.
"""

import os
import statistics
import sys
import time

import numpy as np
import pytest

from conftest import build_dataset, smooth_image
from starnet.autodiff import Tensor, conv2d, conv_transpose2d
from starnet.checkpoint import load_checkpoint
from starnet.data import BatchSpec, scan_dataset
from starnet.flow import estimate_flow
from starnet.gradcheck import gradcheck
from starnet.image import bicubic_resize, luma
from starnet.losses import (LossTargets, LossWeights, VariantSpec, l1_loss,
                            loss_r)
from starnet.metrics import interp_error, psnr, ssim
from starnet.model import AblationFlags, ModelConfig, Starnet, clamp01
from starnet.optim import AdaMaxState, adamax_step, zero_grad
from starnet.train import TrainConfig, evaluate, finetune, train, model_to_checkpoint

from test_autodiff import conv2d_oracle, convt2d_oracle
from test_losses_metrics import ssim_oracle


def verdict(n, desc, passed, detail=""):
    tail = f"  [{detail}]" if detail else ""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {n}: {desc}{tail}"
    print("\n" + line, flush=True)
    assert passed, line


# -- 7: metric sanity anchors (cheapest first) ------------------------------

def test_criterion_7_metric_anchors(rng):
    img = rng.random((16, 16, 3)).astype(np.float32)
    p = psnr(np.zeros((8, 8, 3)), np.full((8, 8, 3), 0.5))
    ok = (abs(p - 6.0206) <= 1e-3
          and ssim(img, img) == pytest.approx(1.0, abs=1e-9)
          and interp_error(img, img) == 0.0)
    verdict(7, "metric sanity anchors (PSNR 6.0206 / SSIM 1 / IE 0)", ok,
            f"psnr(0.5)={p:.4f}")


# -- 6: learning-rate schedule fidelity -------------------------------------

def test_criterion_6_schedule_fidelity():
    cfg = TrainConfig()
    log = lambda *a: None
    lr_log = train(cfg, index=None, dry_run=True, log=log).meta["lr_log"]
    base = model_to_checkpoint(Starnet(ModelConfig(c_h=8, c_l=8, seed=0)))
    ft_log = finetune(base, VariantSpec("STAR_T_LR"),
                      TrainConfig(model=ModelConfig(c_h=8, c_l=8, seed=0)),
                      index=None, dry_run=True, log=log).meta["lr_log"]
    ok = (lr_log == [1e-4] * 30 + [1e-5] * 30 + [1e-6] * 10
          and ft_log == [1e-4] * 10 + [1e-5] * 10)
    verdict(6, "exact lr staircase (70-epoch train, 20-epoch finetune)", ok,
            f"train epochs={len(lr_log)} finetune epochs={len(ft_log)}")


# -- 2: kernel oracles ------------------------------------------------------

def _adamax_oracle(theta0, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    theta = theta0.copy()
    m = np.zeros_like(theta)
    u = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        u = np.maximum(b2 * u, np.abs(g))
        theta = theta - (lr / (1 - b1 ** t)) * m / (u + eps)
    return theta


def test_criterion_2_kernel_oracles(rng):
    cases = 100
    worst = {}

    err = 0.0
    for _ in range(cases):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice((1, 3)))
        s, p = int(rng.choice((1, 2))), int(rng.choice((0, 1)))
        h, w = rng.integers(k + p, 7, size=2)
        x = rng.standard_normal((n, ci, h, w))
        wt = rng.standard_normal((co, ci, k, k))
        b = rng.standard_normal(co)
        got = conv2d(Tensor(x), Tensor(wt), Tensor(b), s, p).data
        err = max(err, float(np.abs(got - conv2d_oracle(x, wt, b, s, p)).max()))
    worst["conv2d"] = err

    err = 0.0
    for _ in range(cases):
        n, ci, co = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice((2, 4)))
        s = int(rng.choice((1, 2)))
        p = int(rng.integers(0, k // 2 + 1))
        h, w = rng.integers(2, 6, size=2)
        x = rng.standard_normal((n, ci, h, w))
        wt = rng.standard_normal((ci, co, k, k))
        b = rng.standard_normal(co)
        got = conv_transpose2d(Tensor(x), Tensor(wt), Tensor(b), s, p).data
        err = max(err, float(np.abs(got - convt2d_oracle(x, wt, b, s, p)).max()))
    worst["conv_transpose2d"] = err

    err = 0.0
    for _ in range(cases):
        shape = (int(rng.integers(1, 4)), 3,
                 int(rng.integers(2, 9)), int(rng.integers(2, 9)))
        a = rng.standard_normal(shape)
        b = rng.standard_normal(shape)
        want = sum(np.mean(np.abs(a[i] - b[i])) for i in range(shape[0]))
        err = max(err, abs(float(l1_loss(Tensor(a), Tensor(b)).data) - want))
    worst["l1"] = err

    err = 0.0
    for _ in range(cases):
        h, w = rng.integers(11, 16, size=2)
        a = rng.random((h, w, 3))
        b = np.clip(a + rng.standard_normal(a.shape) * 0.1, 0, 1)
        err = max(err, abs(ssim(a, b) - ssim_oracle(a, b)))
    worst["ssim"] = err

    err = 0.0
    for _ in range(cases):
        h, w = rng.integers(4, 12, size=2)
        a = rng.random((h, w, 3))
        b = rng.random((h, w, 3))
        want = float(np.sqrt(np.mean((255.0 * (luma(a) - luma(b))) ** 2)))
        err = max(err, abs(interp_error(a, b) - want))
    worst["ie"] = err

    err = 0.0
    for _ in range(cases):
        size = int(rng.integers(1, 6))
        steps = int(rng.integers(1, 5))
        lr = float(10 ** rng.uniform(-4, -2))
        theta0 = rng.standard_normal(size)
        grads = [rng.standard_normal(size) for _ in range(steps)]
        from starnet.autodiff import Parameter
        p = Parameter("w", theta0.copy())
        st = AdaMaxState()
        for g in grads:
            p.grad = g.copy()
            adamax_step([p], st, lr=lr)
        err = max(err, float(np.abs(p.data - _adamax_oracle(theta0, grads, lr)).max()))
    worst["adamax"] = err

    ok = (worst["conv2d"] <= 1e-6 and worst["conv_transpose2d"] <= 1e-6
          and worst["l1"] <= 1e-6 and worst["adamax"] <= 1e-6
          and worst["ssim"] <= 1e-4 and worst["ie"] <= 1e-4)
    verdict(2, f"kernel oracles, {cases} randomized cases each", ok,
            " ".join(f"{k}={v:.2e}" for k, v in worst.items()))


# -- 5: invariants & properties suites --------------------------------------

def test_criterion_5_invariant_suites():
    here = os.path.dirname(__file__)
    modules = ["test_autodiff.py", "test_image.py", "test_flow.py",
               "test_model.py", "test_losses_metrics.py", "test_data.py",
               "test_train.py", "test_gradcheck.py", "test_cli.py"]
    code = pytest.main(["-q", "-p", "no:cacheprovider", "--no-header",
                        *[os.path.join(here, m) for m in modules]])
    verdict(5, "all invariants & properties suites", code == 0,
            f"nested pytest exit {code}")


# -- 1: gradient fidelity ---------------------------------------------------

def test_criterion_1_gradient_fidelity():
    cfg = ModelConfig(c_h=16, c_l=32, seed=0)
    t0 = time.time()
    r = gradcheck(cfg=cfg, loss_kind="L_r", coords_per_group=18, seed=0)
    f = gradcheck(cfg=cfg, loss_kind="L_f", coords_per_group=10, seed=0)
    elapsed = time.time() - t0
    coords = r["coords_checked"] + f["coords_checked"]
    ok = (r["passed"] and f["passed"] and r["max_rel"] <= 1e-3
          and f["max_rel"] <= 1e-3 and coords >= 200 and elapsed <= 300)
    verdict(1, "gradcheck on toy model, both losses, all 8 groups", ok,
            f"L_r={r['max_rel']:.2e} L_f={f['max_rel']:.2e} "
            f"coords={coords} t={elapsed:.0f}s")


# -- 3: overfit smoke test --------------------------------------------------

def _overfit_triplet():
    """Band-limited, low-contrast translating scene: a 96x96 canvas
    upsampled from a 3x3 coarse grid, contrast compressed around mid-gray,
    cropped to three 64x64 frames moving 2 px per step."""
    rng = np.random.default_rng(7)
    canvas = smooth_image(rng, 96, 96, cells=32)
    canvas = (0.5 + (canvas - 0.5) * 0.2).astype(np.float32)
    hr = []
    for k in range(3):
        r, c = 8 + 2 * k, 24 - 2 * k
        hr.append(np.ascontiguousarray(canvas[r:r + 64, c:c + 64]))
    lr = [bicubic_resize(im, 16, 16) for im in hr]
    legs = {"fwd": (0, 2), "bwd": (2, 0), "t_tn": (0, 1), "tn_t1": (1, 2),
            "t1_tn": (2, 1), "tn_t": (1, 0)}
    flows = {k: estimate_flow(lr[a], lr[b]) for k, (a, b) in legs.items()}
    return hr, lr, flows


def _overfit_lr(step):
    if step < 800:
        return 4e-3
    if step < 1200:
        return 1.3e-3
    if step < 1600:
        return 4e-4
    return 1.3e-4


def test_criterion_3_overfit_single_triplet():
    hr, lr, flows = _overfit_triplet()
    nchw = lambda x: np.transpose(x, (2, 0, 1))[None].astype(np.float32)
    targets = LossTargets(
        hr_t=nchw(hr[0]), hr_tn=nchw(hr[1]), hr_t1=nchw(hr[2]),
        lr_tn=nchw(lr[1]),
        f_t_tn=nchw(flows["t_tn"]), f_tn_t1=nchw(flows["tn_t1"]),
        f_t1_tn=nchw(flows["t1_tn"]), f_tn_t=nchw(flows["tn_t"]))
    inputs = (nchw(lr[0]), nchw(lr[2]), nchw(flows["fwd"]), nchw(flows["bwd"]))
    model = Starnet(ModelConfig(c_h=16, c_l=32, seed=0))
    opt = AdaMaxState()
    params = list(model.parameters())
    variant, weights = VariantSpec("STAR"), LossWeights()
    gt = [hr[0], hr[1], hr[2], lr[1]]

    t0 = time.time()
    reached = None
    scores = {}
    for step in range(2000):
        zero_grad(params)
        out = model.full_forward(*inputs)
        loss = loss_r(out, targets, weights, variant)
        loss.backward()
        adamax_step(params, opt, lr=_overfit_lr(step))
        if step % 25 == 24:
            scores = {k: psnr(clamp01(v)[0].transpose(1, 2, 0), g)
                      for (k, v), g in zip(out.images().items(), gt)}
            if min(scores.values()) >= 40.0:
                reached = step + 1
                break
    elapsed = time.time() - t0
    ok = reached is not None and elapsed <= 900
    verdict(3, "overfit one synthetic triplet to >=40 dB on all 4 outputs",
            ok, f"steps={reached} t={elapsed:.0f}s "
            + " ".join(f"{k}={v:.1f}" for k, v in scores.items()))


# -- 4: ablation ordering ---------------------------------------------------

ABLATION_STEPS = 1200


def _ablation_run(tindex, vindex, tmp, use_stage2, seed):
    cfg = TrainConfig(
        epochs_total=500, lr_initial=3e-3, lr_decay_every=250,
        batch=BatchSpec(batch_size=4, patch_lr=(8, 8), seed=seed),
        model=ModelConfig(c_h=16, c_l=32, seed=seed,
                          ablation=AblationFlags(use_stage2=use_stage2)),
        augment=False)
    out = os.path.join(tmp, f"abl_{int(use_stage2)}_{seed}")
    os.makedirs(out, exist_ok=True)
    train(cfg, tindex, out_dir=out, max_steps=ABLATION_STEPS,
          log=lambda *a: None, save_every_epoch=False)
    ckpt = load_checkpoint(os.path.join(out, "final.ckpt"))
    rep = evaluate(ckpt, vindex, metrics=("psnr",), log=lambda *a: None)
    return rep["outputs"]["I_sr_tn"]["psnr"]


def test_criterion_4_ablation_ordering(tmp_path):
    troot, tlist = build_dataset(tmp_path / "train", 50, hr_size=32, seed=100)
    vroot, vlist = build_dataset(tmp_path / "val", 8, hr_size=32, seed=200)
    tindex = scan_dataset(troot, tlist)
    vindex = scan_dataset(vroot, vlist, split="test")
    tmp = str(tmp_path)
    full = [_ablation_run(tindex, vindex, tmp, True, s) for s in (0, 1, 2)]
    ablated = [_ablation_run(tindex, vindex, tmp, False, s) for s in (0, 1, 2)]
    med_full = statistics.median(full)
    med_abl = statistics.median(ablated)
    verdict(4, "full model >= w/o-stage-2 on I_sr_tn (3-seed median)",
            med_full >= med_abl,
            f"full={med_full:.3f} dB ablated={med_abl:.3f} dB "
            f"({ABLATION_STEPS} steps, 50-triplet corpus)")
