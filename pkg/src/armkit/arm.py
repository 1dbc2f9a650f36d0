"""Aliasing reduction module: adaptive smoothing of folded attention maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import ConfigurationError, DimensionError
from .filter_bank import FilterBank, gaussian_kernel, isotropic_spec, sample_bank
from .tensor import (
    ModulationState,
    Tensor,
    batch_norm2d,
    depthwise_conv2d,
    matmul,
    mean,
    parameter,
    reshape,
    softmax,
)

Variant = Literal["gaussian", "learnable", "bank"]
VARIANTS = ("gaussian", "learnable", "bank")

FIXED_GAUSSIAN_SIGMA = 1.0
LEARNABLE_INIT_NOISE = 0.01
HEAD_INIT_STD = 0.02


@dataclass(frozen=True)
class ARMConfig:
    variant: Variant = "bank"
    bank: FilterBank | None = None
    k: int = 3
    use_external_modulation: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"ARMConfig.variant must be one of {VARIANTS}, got {self.variant!r}")
        if (self.bank is not None) != (self.variant == "bank"):
            raise ConfigurationError("ARMConfig.bank must be set exactly when variant == 'bank'")
        if self.variant == "bank":
            object.__setattr__(self, "k", self.bank.k)
        elif self.k < 3 or self.k % 2 == 0:
            raise ConfigurationError(f"ARMConfig.k must be odd and >= 3, got {self.k}")

    @classmethod
    def with_bank(cls, seed: int = 0, n: int = 8, k: int = 3, dog_count: int | None = None,
                  use_external_modulation: bool = True) -> "ARMConfig":
        return cls("bank", sample_bank(seed, n, k, dog_count), k, use_external_modulation)

    @property
    def n(self) -> int | None:
        return self.bank.n if self.bank is not None else None


@dataclass
class ARMParams:
    channels: int
    coeff_weight: Tensor | None = None  # (C, C*n)
    coeff_bias: Tensor | None = None  # (C*n,)
    learnable_kernels: Tensor | None = None  # (C, k, k)
    modulation: ModulationState | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in ("coeff_weight", "coeff_bias", "learnable_kernels"):
            t = getattr(self, name)
            if t is not None:
                out[name] = t
        if self.modulation is not None:
            out["modulation.gamma"] = self.modulation.gamma
            out["modulation.beta"] = self.modulation.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.modulation is None:
            return {}
        return {"modulation.running_mean": self.modulation.running_mean,
                "modulation.running_var": self.modulation.running_var}


def fixed_gaussian(k: int = 3) -> np.ndarray:
    return gaussian_kernel(isotropic_spec(FIXED_GAUSSIAN_SIGMA, k)).weights


def init_arm_params(cfg: ARMConfig, channels: int, rng: np.random.Generator) -> ARMParams:
    params = ARMParams(channels)
    if cfg.variant == "bank":
        n = cfg.bank.n
        params.coeff_weight = parameter(rng.normal(0.0, HEAD_INIT_STD, (channels, channels * n)))
        params.coeff_bias = parameter(np.zeros(channels * n))
    elif cfg.variant == "learnable":
        base = np.broadcast_to(fixed_gaussian(cfg.k), (channels, cfg.k, cfg.k))
        params.learnable_kernels = parameter(base + rng.normal(0.0, LEARNABLE_INIT_NOISE, base.shape))
    if cfg.use_external_modulation:
        params.modulation = ModulationState(channels)
    return params


def predict_coefficients(attn: Tensor, params: ARMParams, n: int) -> Tensor:
    """Simplex weights over the bank, one n-vector per (sample, channel)."""
    if params.coeff_weight is None:
        raise ConfigurationError("predict_coefficients needs a bank-variant coefficient head")
    B, C = attn.shape[:2]
    if params.coeff_weight.shape != (C, C * n):
        raise DimensionError(
            f"coefficient head expects weights of shape {(C, C * n)} for input {attn.shape}, "
            f"got {params.coeff_weight.shape}"
        )
    pooled = mean(attn, axis=(2, 3))  # B, C
    logits = matmul(pooled, params.coeff_weight) + params.coeff_bias
    return softmax(reshape(logits, (B, C, n)), axis=-1)


def combine_filters(bank: FilterBank, coeffs: Tensor) -> Tensor:
    """Per-(sample, channel) filters ``sum_j coeffs[..., j] * atom_j``."""
    if coeffs.shape[-1] != bank.n:
        raise DimensionError(f"coefficients have last dim {coeffs.shape[-1]}, bank has n={bank.n}")
    k = bank.k
    atoms = Tensor(bank.stack().reshape(bank.n, k * k))
    flat = matmul(reshape(coeffs, (-1, bank.n)), atoms)
    return reshape(flat, coeffs.shape[:-1] + (k, k))


def apply_arm(attn: Tensor, cfg: ARMConfig, params: ARMParams, training: bool) -> Tensor:
    if attn.ndim != 4:
        raise DimensionError(f"apply_arm expects a folded (B, C, H, W) map, got {attn.shape}")
    B, C, H, W = attn.shape
    if H < cfg.k or W < cfg.k:
        raise ConfigurationError(f"attention map {H}x{W} is smaller than the {cfg.k}x{cfg.k} filter")
    if C != params.channels:
        raise DimensionError(f"ARM built for {params.channels} channels, got input {attn.shape}")

    if cfg.variant == "gaussian":
        kernels = Tensor(np.broadcast_to(fixed_gaussian(cfg.k), (C, cfg.k, cfg.k)))
        out = depthwise_conv2d(attn, kernels)
    elif cfg.variant == "learnable":
        out = depthwise_conv2d(attn, params.learnable_kernels)
    else:
        coeffs = predict_coefficients(attn, params, cfg.bank.n)
        out = depthwise_conv2d(attn, combine_filters(cfg.bank, coeffs))

    if cfg.use_external_modulation:
        out = batch_norm2d(out, params.modulation, training)
    return out
