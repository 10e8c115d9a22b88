"""Training objectives: pixel loss, feature-space loss, flow-consistency
loss, and the variant-specific combinations."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, Parameter, ContractViolation, conv2d, relu
from .optim import he_uniform


@dataclass(frozen=True)
class LossWeights:
    w1: float = 1.0
    w2: float = 0.1
    w3: float = 0.1

    def __post_init__(self):
        if self.w1 < 0 or self.w2 < 0 or self.w3 < 0:
            raise ContractViolation("loss weights must be non-negative")


VARIANT_TERMS = {
    "STAR": frozenset({"space", "time", "space_time"}),
    "STAR_ST": frozenset({"space", "space_time"}),
    "STAR_S": frozenset({"space"}),
    "STAR_T_HR": frozenset({"time"}),
    "STAR_T_LR": frozenset({"time"}),
}


@dataclass(frozen=True)
class VariantSpec:
    name: str = "STAR"

    def __post_init__(self):
        if self.name not in VARIANT_TERMS:
            raise ContractViolation(f"unknown variant {self.name!r}")

    @property
    def active_terms(self) -> frozenset:
        return VARIANT_TERMS[self.name]

    @property
    def input_grid(self) -> str:
        """Which resolution feeds the network: the original frames for the
        HR-regime temporal variant, the downscaled frames otherwise."""
        return "hr" if self.name == "STAR_T_HR" else "lr"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))


def l1_loss(pred, target) -> Tensor:
    """Per-sample mean absolute difference, summed over the batch."""
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ContractViolation("l1_loss: shape mismatch")
    per_sample = pred.data[0].size
    return (pred - target).abs().sum() * (1.0 / per_sample)


class FeatureExtractor:
    """Fixed, seeded convolutional map to a 1/32-scale feature space.

    Stands in for a pretrained deep feature stack: five stride-2 3x3 conv
    stages with ReLU.  Weights never train; gradients flow only to the
    input image.  Any object with the same __call__ contract can be
    substituted.
    """

    CHANNELS = (8, 16, 32, 32, 32)

    def __init__(self, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.layers = []
        cin = 3
        for i, cout in enumerate(self.CHANNELS):
            w = Parameter(f"fx.conv{i}.weight",
                          he_uniform(rng, (cout, cin, 3, 3), cin * 9, dtype))
            b = Parameter(f"fx.conv{i}.bias", np.zeros(cout, dtype))
            w.requires_grad = False
            b.requires_grad = False
            self.layers.append((w, b))
            cin = cout

    def __call__(self, img) -> Tensor:
        x = _as_tensor(img)
        if x.shape[2] < 32 or x.shape[3] < 32:
            raise ContractViolation("feature extractor needs >= 32 px per side")
        for w, b in self.layers:
            x = relu(conv2d(x, w, b, stride=2, padding=1))
        return x


def feature_loss(pred, target, fx: FeatureExtractor) -> Tensor:
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    if pred.shape != target.shape:
        raise ContractViolation("feature_loss: shape mismatch")
    d = fx(pred) - fx(target)
    return (d * d).sum()


def flow_refine_loss(f_hat_fwd, f_hat_bwd,
                     f_t_tn, f_tn_t1, f_t1_tn, f_tn_t) -> Tensor:
    """Consistency of refined flows with the composed ground-truth legs;
    mean squared error per flow element."""
    fields = [f_t_tn, f_tn_t1, f_t1_tn, f_tn_t]
    f_hat_fwd = _as_tensor(f_hat_fwd)
    f_hat_bwd = _as_tensor(f_hat_bwd)
    fields = [_as_tensor(f) for f in fields]
    for f in fields + [f_hat_bwd]:
        if f.shape != f_hat_fwd.shape:
            raise ContractViolation("flow_refine_loss: dimension mismatch")
    f_t_tn, f_tn_t1, f_t1_tn, f_tn_t = fields
    d1 = f_hat_fwd - (f_t_tn + f_tn_t1)
    d2 = f_hat_bwd - (f_t1_tn + f_tn_t)
    norm = 1.0 / f_hat_fwd.data[0].size
    return ((d1 * d1).sum() + (d2 * d2).sum()) * norm


@dataclass
class LossTargets:
    """Ground truth for one batch, as (N,C,H,W) arrays."""
    hr_t: np.ndarray = None
    hr_tn: np.ndarray = None
    hr_t1: np.ndarray = None
    lr_tn: np.ndarray = None
    # composed-consistency legs for the flow loss (N,2,H,W each)
    f_t_tn: np.ndarray = None
    f_tn_t1: np.ndarray = None
    f_t1_tn: np.ndarray = None
    f_tn_t: np.ndarray = None

    def has_flow_legs(self) -> bool:
        return all(x is not None for x in
                   (self.f_t_tn, self.f_tn_t1, self.f_t1_tn, self.f_tn_t))


def _require(value, what, variant):
    if value is None:
        raise ContractViolation(f"variant {variant} requires {what}")
    return value


def loss_r(outputs, targets: LossTargets, weights: LossWeights,
           variant: VariantSpec) -> Tensor:
    """w1 * (L1 over the variant's active frames) + w2 * flow consistency."""
    terms = variant.active_terms
    total = None

    def add(t):
        nonlocal total
        total = t if total is None else total + t

    if "space" in terms:
        add(l1_loss(outputs.I_sr_t, _require(targets.hr_t, "hr_t", variant.name)))
        add(l1_loss(outputs.I_sr_t1, _require(targets.hr_t1, "hr_t1", variant.name)))
    if "space_time" in terms:
        add(l1_loss(outputs.I_sr_tn, _require(targets.hr_tn, "hr_tn", variant.name)))
    if "time" in terms:
        add(l1_loss(outputs.I_l_tn, _require(targets.lr_tn, "lr_tn", variant.name)))
    total = total * weights.w1
    if (outputs.flow_hat_fwd is not None and targets.has_flow_legs()
            and weights.w2 > 0):
        total = total + flow_refine_loss(
            outputs.flow_hat_fwd, outputs.flow_hat_bwd,
            targets.f_t_tn, targets.f_tn_t1,
            targets.f_t1_tn, targets.f_tn_t) * weights.w2
    return total


def loss_f(outputs, targets: LossTargets, weights: LossWeights,
           variant: VariantSpec, fx: FeatureExtractor) -> Tensor:
    """loss_r plus w3 * feature loss over the active HR frames."""
    total = loss_r(outputs, targets, weights, variant)
    terms = variant.active_terms
    feat = None

    def add(t):
        nonlocal feat
        feat = t if feat is None else feat + t

    if "space" in terms:
        add(feature_loss(outputs.I_sr_t, targets.hr_t, fx))
        add(feature_loss(outputs.I_sr_t1, targets.hr_t1, fx))
    if "space_time" in terms:
        add(feature_loss(outputs.I_sr_tn, targets.hr_tn, fx))
    if feat is not None:
        total = total + feat * weights.w3
    return total
