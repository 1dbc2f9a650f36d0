"""Aliasing reduction for toy vision transformers, on a small numpy autodiff core."""

from .arm import ARMConfig, ARMParams, apply_arm, combine_filters, predict_coefficients
from .estimator import ARMViTClassifier
from .filter_bank import FilterBank, Kernel, KernelSpec, dog_kernel, gaussian_kernel, sample_bank
from .gradcheck import grad_check
from .tensor import Tensor, backward
from .vit import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ARMConfig", "ARMParams", "ARMViTClassifier", "FilterBank", "Kernel", "KernelSpec", "ModelConfig", "Tensor",
    "apply_arm", "backward", "combine_filters", "dog_kernel", "gaussian_kernel", "grad_check",
    "predict_coefficients", "sample_bank",
]
