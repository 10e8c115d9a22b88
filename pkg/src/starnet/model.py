"""The space-time super-resolution network.

Three stages: initialization (joint spatial 4x upscaling plus in-between
feature synthesis), cycle-consistency refinement with ReLU-gated residual
corrections, and single-conv reconstruction.  A small U-Net refines the
input flow pair before it is consumed.  Ablation flags switch off stage 2,
the flow inputs, the flow refiner, and the two temporal paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import (Tensor, Parameter, ContractViolation, conv2d,
                       conv_transpose2d, concat_channels, relu, prelu)
from .optim import he_uniform

GROUP_NAMES = ("theta_s", "theta_d", "theta_m", "theta_st",
               "theta_f", "theta_b", "theta_rec", "theta_flow")


@dataclass(frozen=True)
class AblationFlags:
    use_stage2: bool = True
    use_flow_input: bool = True
    use_flow_refinement: bool = True
    tsr_hr_path: bool = True
    tsr_lr_path: bool = True


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 4
    n: float = 0.5
    c_h: int = 64
    c_l: int = 128
    st_residual_blocks: int = 5
    fb_residual_blocks: int = 5
    m_residual_blocks: int = 2
    ablation: AblationFlags = field(default_factory=AblationFlags)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        if "ablation" in d and isinstance(d["ablation"], dict):
            d["ablation"] = AblationFlags(**d["ablation"])
        return ModelConfig(**d)


# -- layers -----------------------------------------------------------------

class _Conv:
    def __init__(self, reg, rng, name, cin, cout, k, stride=1, pad=0,
                 dtype=np.float32, zero_init=False):
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype)
        else:
            w = he_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.w = reg(Parameter(name + ".weight", w))
        self.b = reg(Parameter(name + ".bias", np.zeros(cout, dtype)))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return conv2d(x, self.w, self.b, self.stride, self.pad)


class _Deconv:
    def __init__(self, reg, rng, name, cin, cout, k, stride, pad, dtype=np.float32):
        w = he_uniform(rng, (cin, cout, k, k), cin * k * k, dtype)
        self.w = reg(Parameter(name + ".weight", w))
        self.b = reg(Parameter(name + ".bias", np.zeros(cout, dtype)))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return conv_transpose2d(x, self.w, self.b, self.stride, self.pad)


class _PReLU:
    def __init__(self, reg, name, dtype=np.float32):
        self.slope = reg(Parameter(name + ".slope", np.asarray(0.25, dtype)))

    def __call__(self, x):
        return prelu(x, self.slope)


class _ResBlock:
    """conv3x3 -> PReLU -> conv3x3 with identity skip.

    The second conv starts at zero so a stack of blocks is the identity at
    initialization; otherwise activation variance doubles per block and the
    raw reconstructions start hundreds of units outside [0, 1].
    """

    def __init__(self, reg, rng, name, ch, dtype=np.float32):
        self.c1 = _Conv(reg, rng, name + ".conv1", ch, ch, 3, 1, 1, dtype)
        self.act = _PReLU(reg, name + ".act", dtype)
        self.c2 = _Conv(reg, rng, name + ".conv2", ch, ch, 3, 1, 1, dtype,
                        zero_init=True)

    def __call__(self, x):
        return x + self.c2(self.act(self.c1(x)))


def _zeros_like_shape(shape, dtype):
    return Tensor(np.zeros(shape, dtype))


@dataclass
class StageOutputs:
    H_t: Tensor = None
    H_t1: Tensor = None
    L_t: Tensor = None
    L_t1: Tensor = None
    M: Tensor = None
    H_tn: Tensor = None
    L_tn: Tensor = None
    H_t_hat: Tensor = None
    H_tn_hat: Tensor = None
    H_t1_hat: Tensor = None
    L_tn_hat: Tensor = None
    I_sr_t: Tensor = None
    I_sr_tn: Tensor = None
    I_sr_t1: Tensor = None
    I_l_tn: Tensor = None
    flow_hat_fwd: Tensor = None
    flow_hat_bwd: Tensor = None

    def images(self) -> dict:
        return {"I_sr_t": self.I_sr_t, "I_sr_tn": self.I_sr_tn,
                "I_sr_t1": self.I_sr_t1, "I_l_tn": self.I_l_tn}


class Starnet:
    """Assembled network; parameters live in eight named groups."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        if cfg.scale != 4:
            raise ContractViolation("only the 4x sampler geometry is supported")
        self.cfg = cfg
        self.dtype = dtype
        self.groups = {g: {} for g in GROUP_NAMES}
        rng = np.random.default_rng(cfg.seed)
        ch, cl = cfg.c_h, cfg.c_l
        ab = cfg.ablation

        def reg_in(group):
            def reg(p):
                if p.name in self.groups[group]:
                    raise ContractViolation(f"duplicate parameter {p.name}")
                self.groups[group][p.name] = p
                return p
            return reg

        # Net_S: two frames + one flow -> HR features
        r = reg_in("theta_s")
        self.s_in = _Conv(r, rng, "net_s.in", 8, cl, 3, 1, 1, dtype)
        self.s_act = _PReLU(r, "net_s.act", dtype)
        self.s_blocks = [_ResBlock(r, rng, f"net_s.res{i}", cl, dtype)
                         for i in range(2)]
        self.s_up = _Deconv(r, rng, "net_s.up", cl, ch, 8, 4, 2, dtype)
        self.s_up_act = _PReLU(r, "net_s.up_act", dtype)

        # Net_D: single strided conv HR -> LR (shared at every call site)
        r = reg_in("theta_d")
        self.d_down = _Conv(r, rng, "net_d.down", ch, cl, 8, 4, 2, dtype)

        # Net_M: bidirectional flows -> motion features
        if ab.use_flow_input:
            r = reg_in("theta_m")
            self.m_in = _Conv(r, rng, "net_m.in", 4, cl, 3, 1, 1, dtype)
            self.m_act = _PReLU(r, "net_m.act", dtype)
            self.m_blocks = [_ResBlock(r, rng, f"net_m.res{i}", cl, dtype)
                             for i in range(cfg.m_residual_blocks)]

        # Net_ST: in-between features on both grids
        r = reg_in("theta_st")
        self.st_in = _Conv(r, rng, "net_st.in", 3 * cl, cl, 3, 1, 1, dtype)
        self.st_act = _PReLU(r, "net_st.act", dtype)
        self.st_blocks = [_ResBlock(r, rng, f"net_st.res{i}", cl, dtype)
                          for i in range(cfg.st_residual_blocks)]
        self.st_up = _Deconv(r, rng, "net_st.up", cl, ch, 8, 4, 2, dtype)
        self.st_up_act = _PReLU(r, "net_st.up_act", dtype)
        if ab.tsr_hr_path:
            self.st_hr = _Conv(r, rng, "net_st.hr", 2 * ch, ch, 3, 1, 1, dtype)

        # Net_F / Net_B: projection subnets of stage 2
        self.f_net = self._build_projection("theta_f", "net_f", rng, dtype)
        self.b_net = self._build_projection("theta_b", "net_b", rng, dtype)

        # Net_rec: one shared HR head, one LR head
        r = reg_in("theta_rec")
        self.rec_hr = _Conv(r, rng, "net_rec.hr", ch, 3, 3, 1, 1, dtype)
        self.rec_lr = _Conv(r, rng, "net_rec.lr", cl, 3, 3, 1, 1, dtype)

        # Net_flow: U-Net flow refiner, residual head zero-initialized
        if ab.use_flow_refinement:
            r = reg_in("theta_flow")
            self.fl_e1 = _Conv(r, rng, "net_flow.enc1", 8, 32, 3, 1, 1, dtype)
            self.fl_a1 = _PReLU(r, "net_flow.enc1_act", dtype)
            self.fl_e2 = _Conv(r, rng, "net_flow.enc2", 32, 64, 3, 2, 1, dtype)
            self.fl_a2 = _PReLU(r, "net_flow.enc2_act", dtype)
            self.fl_e3 = _Conv(r, rng, "net_flow.enc3", 64, 128, 3, 2, 1, dtype)
            self.fl_a3 = _PReLU(r, "net_flow.enc3_act", dtype)
            self.fl_d2 = _Deconv(r, rng, "net_flow.dec2", 128, 64, 4, 2, 1, dtype)
            self.fl_da2 = _PReLU(r, "net_flow.dec2_act", dtype)
            self.fl_d1 = _Deconv(r, rng, "net_flow.dec1", 64, 32, 4, 2, 1, dtype)
            self.fl_da1 = _PReLU(r, "net_flow.dec1_act", dtype)
            self.fl_head = _Conv(r, rng, "net_flow.head", 32, 2, 3, 1, 1, dtype,
                                 zero_init=True)

    def _build_projection(self, group, name, rng, dtype):
        """LR features + motion -> HR features (stage-2 projector)."""
        r_ = self.groups[group]

        def reg_fn(p):
            if p.name in r_:
                raise ContractViolation(f"duplicate parameter {p.name}")
            r_[p.name] = p
            return p

        cfg = self.cfg
        net = {
            "in": _Conv(reg_fn, rng, name + ".in", 3 * cfg.c_l, cfg.c_l, 3, 1, 1, dtype),
            "act": _PReLU(reg_fn, name + ".act", dtype),
            "blocks": [_ResBlock(reg_fn, rng, f"{name}.res{i}", cfg.c_l, dtype)
                       for i in range(cfg.fb_residual_blocks)],
            "up": _Deconv(reg_fn, rng, name + ".up", cfg.c_l, cfg.c_h, 8, 4, 2, dtype),
            "up_act": _PReLU(reg_fn, name + ".up_act", dtype),
        }
        return net

    # -- parameter plumbing -------------------------------------------------

    def parameters(self):
        for g in GROUP_NAMES:
            yield from self.groups[g].values()

    def named_parameters(self):
        for g in GROUP_NAMES:
            for p in self.groups[g].values():
                yield g, p

    def count_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    # -- subnet forwards ----------------------------------------------------

    def net_s_forward(self, I_a: Tensor, I_b: Tensor, F_ba: Tensor) -> Tensor:
        if I_a.shape[2:] != I_b.shape[2:] or I_a.shape[2:] != F_ba.shape[2:]:
            raise ContractViolation("net_s: inputs must share LR dimensions")
        x = concat_channels([I_a, I_b, F_ba])
        x = self.s_act(self.s_in(x))
        for blk in self.s_blocks:
            x = blk(x)
        return self.s_up_act(self.s_up(x))

    def net_d_forward(self, H: Tensor) -> Tensor:
        if H.shape[2] % self.cfg.scale or H.shape[3] % self.cfg.scale:
            raise ContractViolation("net_d: HR size must be divisible by the scale")
        return self.d_down(H)

    def net_m_forward(self, F_fwd: Tensor, F_bwd: Tensor) -> Tensor:
        if F_fwd.shape != F_bwd.shape:
            raise ContractViolation("net_m: flows must share dimensions")
        x = concat_channels([F_fwd, F_bwd])
        x = self.m_act(self.m_in(x))
        for blk in self.m_blocks:
            x = blk(x)
        return x

    def net_st_forward(self, H_t, H_t1, L_t, L_t1, M):
        ab = self.cfg.ablation
        x = concat_channels([L_t, L_t1, M])
        x = self.st_act(self.st_in(x))
        for blk in self.st_blocks:
            x = blk(x)
        trunk = x
        if ab.tsr_lr_path:
            L_tn = trunk
        else:
            L_tn = _zeros_like_shape(trunk.shape, self.dtype)
        H_tn = self.st_up_act(self.st_up(trunk))
        if ab.tsr_hr_path:
            H_tn = H_tn + self.st_hr(concat_channels([H_t, H_t1]))
        return H_tn, L_tn

    def _project(self, net, L_a, L_b, M):
        x = concat_channels([L_a, L_b, M])
        x = net["act"](net["in"](x))
        for blk in net["blocks"]:
            x = blk(x)
        return net["up_act"](net["up"](x))

    def stage2_refine(self, s: StageOutputs):
        """Cycle-consistency refinement (ReLU-gated residual corrections)."""
        H_t_b = self._project(self.b_net, s.L_tn, s.L_t, s.M)
        L_t_b = self.net_d_forward(H_t_b)
        H_t_hat = s.H_t + relu(s.H_t - H_t_b)
        L_t_hat = s.L_t + relu(s.L_t - L_t_b)

        H_t1_f = self._project(self.f_net, s.L_tn, s.L_t1, s.M)
        L_t1_f = self.net_d_forward(H_t1_f)
        H_t1_hat = s.H_t1 + relu(s.H_t1 - H_t1_f)
        L_t1_hat = s.L_t1 + relu(s.L_t1 - L_t1_f)

        H_tn_f = self._project(self.f_net, L_t_hat, s.L_tn, s.M)
        L_tn_f = self.net_d_forward(H_tn_f)
        H_tn_b = self._project(self.b_net, L_t1_hat, s.L_tn, s.M)
        L_tn_b = self.net_d_forward(H_tn_b)
        H_tn_hat = s.H_tn + relu(s.H_tn - H_tn_f) + relu(s.H_tn - H_tn_b)
        L_tn_hat = s.L_tn + relu(s.L_tn - L_tn_f) + relu(s.L_tn - L_tn_b)
        return H_t_hat, H_tn_hat, H_t1_hat, L_tn_hat

    def reconstruct(self, H_t_hat, H_tn_hat, H_t1_hat, L_tn_hat):
        return (self.rec_hr(H_t_hat), self.rec_hr(H_tn_hat),
                self.rec_hr(H_t1_hat), self.rec_lr(L_tn_hat))

    def refine_flow(self, F: Tensor, I_a: Tensor, I_b: Tensor) -> Tensor:
        if F.shape[2:] != I_a.shape[2:] or F.shape[2:] != I_b.shape[2:]:
            raise ContractViolation("refine_flow: inputs must share dimensions")
        h, w = F.shape[2], F.shape[3]
        ph = (-h) % 4
        pw = (-w) % 4
        x = concat_channels([F, I_a, I_b])
        x = ad.pad_reflect(x, ph, pw)
        e1 = self.fl_a1(self.fl_e1(x))
        e2 = self.fl_a2(self.fl_e2(e1))
        e3 = self.fl_a3(self.fl_e3(e2))
        d2 = self.fl_da2(self.fl_d2(e3)) + e2
        d1 = self.fl_da1(self.fl_d1(d2)) + e1
        res = self.fl_head(d1)
        res = ad.crop(res, h, w)
        return F + res

    # -- full graph ---------------------------------------------------------

    def full_forward(self, I_t, I_t1, F_fwd=None, F_bwd=None) -> StageOutputs:
        """Run flow refinement, stage 1, stage 2, and reconstruction.

        Inputs are numpy arrays: frames (N,3,H,W), flows (N,2,H,W).
        Reconstructed images are raw (unclamped) tensors; clamp at inference.
        """
        ab = self.cfg.ablation
        I_t = self._as_input(I_t, 3)
        I_t1 = self._as_input(I_t1, 3)
        n, _, h, w = I_t.shape
        out = StageOutputs()

        if ab.use_flow_input:
            if F_fwd is None or F_bwd is None:
                raise ContractViolation("flows required unless use_flow_input is off")
            tF_fwd = self._as_input(F_fwd, 2)
            tF_bwd = self._as_input(F_bwd, 2)
            if ab.use_flow_refinement:
                tF_fwd = self.refine_flow(tF_fwd, I_t, I_t1)
                tF_bwd = self.refine_flow(tF_bwd, I_t1, I_t)
                out.flow_hat_fwd = tF_fwd
                out.flow_hat_bwd = tF_bwd
        else:
            tF_fwd = _zeros_like_shape((n, 2, h, w), self.dtype)
            tF_bwd = _zeros_like_shape((n, 2, h, w), self.dtype)

        # stage 1: initialization
        out.H_t = self.net_s_forward(I_t, I_t1, tF_bwd)
        out.H_t1 = self.net_s_forward(I_t1, I_t, tF_fwd)
        out.L_t = self.net_d_forward(out.H_t)
        out.L_t1 = self.net_d_forward(out.H_t1)
        if ab.use_flow_input:
            out.M = self.net_m_forward(tF_fwd, tF_bwd)
        else:
            out.M = _zeros_like_shape((n, self.cfg.c_l, h, w), self.dtype)
        out.H_tn, out.L_tn = self.net_st_forward(out.H_t, out.H_t1,
                                                 out.L_t, out.L_t1, out.M)

        # stage 2: refinement
        if ab.use_stage2:
            (out.H_t_hat, out.H_tn_hat,
             out.H_t1_hat, out.L_tn_hat) = self.stage2_refine(out)
        else:
            out.H_t_hat, out.H_tn_hat = out.H_t, out.H_tn
            out.H_t1_hat, out.L_tn_hat = out.H_t1, out.L_tn

        # stage 3: reconstruction
        (out.I_sr_t, out.I_sr_tn,
         out.I_sr_t1, out.I_l_tn) = self.reconstruct(
            out.H_t_hat, out.H_tn_hat, out.H_t1_hat, out.L_tn_hat)
        return out

    def _as_input(self, x, channels) -> Tensor:
        if isinstance(x, Tensor):
            t = x
        else:
            t = Tensor(np.asarray(x, dtype=self.dtype))
        if t.data.ndim != 4 or t.data.shape[1] != channels:
            raise ContractViolation(
                f"expected (N,{channels},H,W) input, got {t.data.shape}")
        return t


def clamp01(t: Tensor) -> np.ndarray:
    """Inference-side clamp; detaches from the graph."""
    return np.clip(t.data, 0.0, 1.0)
