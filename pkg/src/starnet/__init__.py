"""Space-time video super-resolution: joint 4x spatial upscaling and 2x
frame interpolation, with a self-contained numpy autodiff core and a full
train/eval/infer harness."""

from .autodiff import ContractViolation, Parameter, Tensor
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .losses import LossWeights, VariantSpec
from .metrics import interp_error, psnr, ssim
from .model import AblationFlags, ModelConfig, Starnet
from .train import TrainConfig, evaluate, finetune, infer, schedule_lr, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags", "Checkpoint", "ContractViolation", "LossWeights",
    "ModelConfig", "Parameter", "Starnet", "Tensor", "TrainConfig",
    "VariantSpec", "evaluate", "finetune", "infer", "interp_error",
    "load_checkpoint", "psnr", "save_checkpoint", "schedule_lr", "ssim",
    "train", "__version__",
]
