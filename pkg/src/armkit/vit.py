"""Toy plain and hierarchical (windowed) vision transformers with ARM hooks.

Parameters live in nested dicts of :class:`~armkit.tensor.Tensor`; ARM
parameters, when attached, sit under an ``"arm"`` key as
:class:`~armkit.arm.ARMParams`. The forward functions are pure apart from
batch-norm running statistics inside ARM in training mode.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .arm import ARMConfig, ARMParams, apply_arm, init_arm_params
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    gelu,
    getitem,
    layer_norm,
    linear,
    matmul,
    mean,
    parameter,
    reshape,
    roll,
    softmax,
    transpose,
)

PLACEMENTS = ("none", "after_patch_embed", "after_attention", "after_shortcut", "after_patch_merging")
INIT_STD = 0.02
MASK_VALUE = -100.0


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 48
    patch_size: int = 2
    in_chans: int = 1
    num_classes: int = 2
    embed_dim: int = 8
    heads: int = 1
    head_dim: int | None = None
    blocks_per_stage: tuple[int, ...] = (2, 2, 6, 2)
    hierarchical: bool = True
    window_size: int = 3
    shifted_windows: bool = False
    mlp_ratio: float = 4.0
    arm_placement: str = "none"
    arm_stages: frozenset[int] = frozenset({0})

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        object.__setattr__(self, "arm_stages", frozenset(int(s) for s in self.arm_stages))
        if self.head_dim is None:
            if self.embed_dim % self.heads:
                raise ConfigurationError(
                    f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})"
                )
            object.__setattr__(self, "head_dim", self.embed_dim // self.heads)
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "in_chans", "num_classes", "embed_dim", "heads", "head_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"ModelConfig.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size ({self.image_size}) must be divisible by patch_size ({self.patch_size})"
            )
        if self.embed_dim % self.heads:
            raise ConfigurationError(f"embed_dim ({self.embed_dim}) must be divisible by heads ({self.heads})")
        if not self.blocks_per_stage or any(b < 1 for b in self.blocks_per_stage):
            raise ConfigurationError(f"blocks_per_stage must be non-empty and positive, got {self.blocks_per_stage}")
        if self.arm_placement not in PLACEMENTS:
            raise ConfigurationError(f"arm_placement must be one of {PLACEMENTS}, got {self.arm_placement!r}")
        if self.arm_placement == "after_patch_merging" and not self.hierarchical:
            raise ConfigurationError("arm_placement='after_patch_merging' requires hierarchical=true")
        bad = [s for s in self.arm_stages if not 0 <= s < self.num_stages]
        if bad:
            raise ConfigurationError(f"arm_stages {sorted(bad)} out of range for {self.num_stages} stages")
        if self.arm_placement == "after_patch_merging" and self.num_stages - 1 in self.arm_stages:
            raise ConfigurationError("arm_stages: the last stage has no patch merging to filter")
        if self.hierarchical:
            if self.window_size < 1:
                raise ConfigurationError(f"window_size must be positive, got {self.window_size}")
            for s in range(self.num_stages):
                g = self.stage_grid(s)
                if s < self.num_stages - 1 and g % 2:
                    raise ConfigurationError(f"stage {s} grid {g}x{g} is odd and cannot be patch-merged")
                if g % self.stage_window(s):
                    raise ConfigurationError(
                        f"stage {s} grid {g}x{g} is not divisible by window_size {self.stage_window(s)}"
                    )

    @property
    def num_stages(self) -> int:
        return len(self.blocks_per_stage)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid * self.grid

    def stage_grid(self, s: int) -> int:
        return self.grid >> s if self.hierarchical else self.grid

    def stage_dim(self, s: int) -> int:
        return self.embed_dim << s if self.hierarchical else self.embed_dim

    def stage_heads(self, s: int) -> int:
        return self.heads << s if self.hierarchical else self.heads

    def stage_window(self, s: int) -> int:
        return min(self.window_size, self.stage_grid(s))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks_per_stage"] = list(self.blocks_per_stage)
        d["arm_stages"] = sorted(self.arm_stages)
        return d


# ---------------------------------------------------------------- parameters


def _linear_params(rng, fan_in, fan_out, bias=True) -> dict:
    # Xavier-uniform: at toy widths a 0.02 std leaves activations near zero
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    p = {"weight": parameter(rng.uniform(-bound, bound, (fan_in, fan_out)))}
    if bias:
        p["bias"] = parameter(np.zeros(fan_out))
    return p


def _norm_params(dim) -> dict:
    return {"weight": parameter(np.ones(dim)), "bias": parameter(np.zeros(dim))}


def init_params(cfg: ModelConfig, arm: ARMConfig | None = None, seed: int = 0) -> dict:
    """Initialise a model. ARM weights come from a separate RNG stream so the
    non-ARM weights are identical with and without ARM for the same seed."""
    if arm is not None and cfg.arm_placement == "none":
        raise ConfigurationError("an ARM config was given but arm_placement is 'none'")
    if arm is None and cfg.arm_placement != "none":
        raise ConfigurationError(f"arm_placement={cfg.arm_placement!r} needs an ARM config")
    rng = np.random.default_rng([seed, 0])
    arm_rng = np.random.default_rng([seed, 1])
    place, stages = cfg.arm_placement, cfg.arm_stages
    d, p = cfg.embed_dim, cfg.patch_size

    params: dict = {
        "embed": {
            "proj": _linear_params(rng, cfg.in_chans * p * p, d),
            "pos": parameter(rng.normal(0.0, INIT_STD, (cfg.num_tokens, d))),
        },
        "stages": [],
    }
    params["embed_arm"] = init_arm_params(arm, d, arm_rng) if place == "after_patch_embed" and 0 in stages else None

    for s, depth in enumerate(cfg.blocks_per_stage):
        dim, heads, hd = cfg.stage_dim(s), cfg.stage_heads(s), cfg.head_dim
        hidden = int(round(dim * cfg.mlp_ratio))
        blocks = []
        for _ in range(depth):
            blk = {
                "norm1": _norm_params(dim),
                "qkv": _linear_params(rng, dim, 3 * heads * hd),
                "proj": _linear_params(rng, heads * hd, dim),
                "norm2": _norm_params(dim),
                "fc1": _linear_params(rng, dim, hidden),
                "fc2": _linear_params(rng, hidden, dim),
                "arm": None,
            }
            if place in ("after_attention", "after_shortcut") and s in stages:
                blk["arm"] = init_arm_params(arm, dim, arm_rng)
            blocks.append(blk)
        stage = {"blocks": blocks, "merge": None, "merge_arm": None}
        if cfg.hierarchical and s < cfg.num_stages - 1:
            stage["merge"] = _linear_params(rng, 4 * dim, 2 * dim, bias=False)
            if place == "after_patch_merging" and s in stages:
                stage["merge_arm"] = init_arm_params(arm, 2 * dim, arm_rng)
        params["stages"].append(stage)

    last = cfg.stage_dim(cfg.num_stages - 1)
    params["head"] = {"norm": _norm_params(last), "fc": _linear_params(rng, last, cfg.num_classes)}
    return params


def named_parameters(tree, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Trainable tensors in a fixed, deterministic order."""
    if tree is None:
        return
    if isinstance(tree, Tensor):
        yield prefix, tree
    elif isinstance(tree, ARMParams):
        for name, t in tree.tensors().items():
            yield f"{prefix}.{name}", t
    elif isinstance(tree, dict):
        for key, value in tree.items():
            yield from named_parameters(value, f"{prefix}.{key}" if prefix else key)
    elif isinstance(tree, (list, tuple)):
        for i, value in enumerate(tree):
            yield from named_parameters(value, f"{prefix}.{i}")


def named_buffers(tree, prefix: str = "") -> Iterator[tuple[str, np.ndarray, ARMParams]]:
    """Batch-norm running statistics, with the ARMParams that owns them."""
    if isinstance(tree, ARMParams):
        for name, arr in tree.buffers().items():
            yield f"{prefix}.{name}", arr, tree
    elif isinstance(tree, dict):
        for key, value in tree.items():
            yield from named_buffers(value, f"{prefix}.{key}" if prefix else key)
    elif isinstance(tree, (list, tuple)):
        for i, value in enumerate(tree):
            yield from named_buffers(value, f"{prefix}.{i}")


def count_parameters(params) -> int:
    return sum(t.size for _, t in named_parameters(params))


def count_arm_parameters(params) -> int:
    return sum(t.size for name, t in named_parameters(params) if "arm." in name)


# ---------------------------------------------------------------- layout helpers


def fold_to_spatial(tokens: Tensor, height: int, width: int) -> Tensor:
    """(B, N, C) token sequence -> (B, C, H', W') map; token i sits at (i // W', i % W')."""
    tokens = as_tensor(tokens)
    B, N, C = tokens.shape
    if N != height * width:
        raise ContractError(f"cannot fold {N} tokens into a {height}x{width} grid")
    return reshape(transpose(tokens, (0, 2, 1)), (B, C, height, width))


def unfold_from_spatial(spatial: Tensor) -> Tensor:
    spatial = as_tensor(spatial)
    B, C, H, W = spatial.shape
    return reshape(transpose(spatial, (0, 2, 3, 1)), (B, H * W, C))


def window_partition(x: Tensor, window: int) -> Tensor:
    """(B, H, W, C) -> (B * nW, w*w, C), windows in row-major order per sample."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % window or W % window:
        raise ConfigurationError(f"{H}x{W} map is not divisible into {window}x{window} windows")
    x = reshape(x, (B, H // window, window, W // window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, C))


def window_reverse(windows: Tensor, window: int, height: int, width: int) -> Tensor:
    windows = as_tensor(windows)
    if height % window or width % window:
        raise ConfigurationError(f"{height}x{width} map is not divisible into {window}x{window} windows")
    C = windows.shape[-1]
    nh, nw = height // window, width // window
    if windows.size % (nh * nw * window * window * C):
        raise DimensionError(f"window tensor {windows.shape} does not fit a {height}x{width} map")
    x = reshape(windows, (-1, nh, nw, window, window, C))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, height, width, C))


def shifted_window_mask(height: int, width: int, window: int, shift: int) -> np.ndarray:
    """Additive (nW, 1, w*w, w*w) mask keeping attention inside rolled regions."""
    ids = np.zeros((1, height, width, 1))
    cuts = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in cuts:
        for ws in cuts:
            ids[:, hs, ws, :] = label
            label += 1
    win = window_partition(Tensor(ids), window).data[..., 0]  # nW, w*w
    diff = win[:, None, :] != win[:, :, None]
    return np.where(diff, MASK_VALUE, 0.0)[:, None]


# ---------------------------------------------------------------- layers


def patch_embed(image, params: dict, cfg: ModelConfig) -> Tensor:
    """Non-overlapping patch flattening (C, py, px order) and linear projection.

    The positional embedding is not added here; see :func:`embed_tokens`.
    """
    image = as_tensor(image)
    if image.ndim != 4:
        raise DimensionError(f"images must be (B, C, H, W), got {image.shape}")
    B, C, H, W = image.shape
    p = cfg.patch_size
    if H % p or W % p:
        raise ConfigurationError(f"image {H}x{W} is not divisible by patch_size {p}")
    x = reshape(image, (B, C, H // p, p, W // p, p))
    x = transpose(x, (0, 2, 4, 1, 3, 5))
    x = reshape(x, (B, (H // p) * (W // p), C * p * p))
    return linear(x, params["proj"]["weight"], params["proj"]["bias"])


def self_attention(z: Tensor, params: dict, heads: int, head_dim: int, mask: np.ndarray | None = None,
                   taps: list | None = None) -> Tensor:
    """Multi-head softmax attention over the token axis of (B, N, d)."""
    B, N, d = z.shape
    if params["qkv"]["weight"].shape != (d, 3 * heads * head_dim):
        raise DimensionError(
            f"qkv weight {params['qkv']['weight'].shape} does not match d={d}, heads={heads}, head_dim={head_dim}"
        )
    qkv = linear(z, params["qkv"]["weight"], params["qkv"]["bias"])
    qkv = transpose(reshape(qkv, (B, N, 3, heads, head_dim)), (2, 0, 3, 1, 4))
    q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(head_dim))
    if mask is not None:
        scores = add(scores, mask)
    attn = softmax(scores, axis=-1)
    if taps is not None:
        taps.append(attn.data)
    out = transpose(matmul(attn, v), (0, 2, 1, 3))
    out = reshape(out, (B, N, heads * head_dim))
    return linear(out, params["proj"]["weight"], params["proj"]["bias"])


def patch_merge(x: Tensor, params: dict) -> Tensor:
    """(B, H, W, C) -> (B, H/2, W/2, 2C) via 2x2 concatenation and projection."""
    x = as_tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ConfigurationError(f"patch_merge needs even spatial dims, got {H}x{W}")
    parts = [
        getitem(x, (slice(None), slice(0, None, 2), slice(0, None, 2))),
        getitem(x, (slice(None), slice(1, None, 2), slice(0, None, 2))),
        getitem(x, (slice(None), slice(0, None, 2), slice(1, None, 2))),
        getitem(x, (slice(None), slice(1, None, 2), slice(1, None, 2))),
    ]
    return linear(concat(parts, axis=-1), params["weight"], params.get("bias"))


def _mlp(x: Tensor, blk: dict) -> Tensor:
    h = gelu(linear(x, blk["fc1"]["weight"], blk["fc1"]["bias"]))
    return linear(h, blk["fc2"]["weight"], blk["fc2"]["bias"])


def _arm_on_tokens(z: Tensor, grid: int, arm: ARMConfig, arm_params: ARMParams, training: bool) -> Tensor:
    return unfold_from_spatial(apply_arm(fold_to_spatial(z, grid, grid), arm, arm_params, training))


@dataclass
class Taps:
    """Collects per-block attention probabilities and folded attention maps."""

    attention: list[tuple[int, int, np.ndarray]] = field(default_factory=list)
    maps: list[tuple[int, int, np.ndarray]] = field(default_factory=list)


def block_forward(z: Tensor, params: dict, cfg: ModelConfig, training: bool, *, stage: int = 0,
                  block: int = 0, arm: ARMConfig | None = None, taps: Taps | None = None) -> Tensor:
    """Pre-norm transformer block with optional ARM on the attention branch
    (``after_attention``) or on the post-shortcut stream (``after_shortcut``)."""
    arm_params = params.get("arm")
    if arm_params is not None and cfg.arm_placement == "none":
        raise ConfigurationError("block carries ARM parameters but arm_placement is 'none'")
    if arm_params is not None and arm is None:
        raise ConfigurationError("block carries ARM parameters but no ARM config was given")
    B, N, C = z.shape
    grid = cfg.stage_grid(stage)
    if N != grid * grid:
        raise DimensionError(f"stage {stage} expects {grid * grid} tokens, got {N}")
    heads, hd = cfg.stage_heads(stage), cfg.head_dim
    probs: list | None = [] if taps is not None else None

    h = layer_norm(z, params["norm1"]["weight"], params["norm1"]["bias"])
    if cfg.hierarchical:
        w = cfg.stage_window(stage)
        shift = w // 2 if cfg.shifted_windows and block % 2 == 1 and w < grid else 0
        x = reshape(h, (B, grid, grid, C))
        if shift:
            x = roll(x, (-shift, -shift), (1, 2))
        mask = None
        if shift:
            mask = np.tile(shifted_window_mask(grid, grid, w, shift), (B, 1, 1, 1))
        windows = self_attention(window_partition(x, w), params, heads, hd, mask=mask, taps=probs)
        spatial = window_reverse(windows, w, grid, grid)  # B, H, W, C
        attn = reshape(spatial, (B, N, C))
    else:
        shift = 0
        attn = self_attention(h, params, heads, hd, taps=probs)

    if arm_params is not None and cfg.arm_placement == "after_attention":
        attn = _arm_on_tokens(attn, grid, arm, arm_params, training)
    if shift:
        attn = reshape(roll(reshape(attn, (B, grid, grid, C)), (shift, shift), (1, 2)), (B, N, C))
    if taps is not None:
        taps.attention.append((stage, block, probs[0]))
        taps.maps.append((stage, block, fold_to_spatial(attn, grid, grid).data))

    z = add(z, attn)
    if arm_params is not None and cfg.arm_placement == "after_shortcut":
        z = _arm_on_tokens(z, grid, arm, arm_params, training)
    return add(z, _mlp(layer_norm(z, params["norm2"]["weight"], params["norm2"]["bias"]), params))


def embed_tokens(image, params: dict, cfg: ModelConfig, training: bool, arm: ARMConfig | None = None) -> Tensor:
    z = patch_embed(image, params["embed"], cfg)
    if params.get("embed_arm") is not None:
        z = _arm_on_tokens(z, cfg.grid, arm, params["embed_arm"], training)
    return add(z, params["embed"]["pos"])


def forward_features(image, params: dict, cfg: ModelConfig, training: bool = False,
                     arm: ARMConfig | None = None, taps: Taps | None = None,
                     stage_outputs: list | None = None) -> Tensor:
    """Token features of the last stage, (B, N_last, C_last)."""
    z = embed_tokens(image, params, cfg, training, arm)
    B = z.shape[0]
    for s, stage in enumerate(params["stages"]):
        for b, blk in enumerate(stage["blocks"]):
            z = block_forward(z, blk, cfg, training, stage=s, block=b, arm=arm, taps=taps)
        if stage_outputs is not None:
            stage_outputs.append(z.data)
        if stage["merge"] is not None:
            g, C = cfg.stage_grid(s), z.shape[-1]
            z = patch_merge(reshape(z, (B, g, g, C)), stage["merge"])
            z = reshape(z, (B, (g // 2) ** 2, 2 * C))
            if stage["merge_arm"] is not None:
                z = _arm_on_tokens(z, g // 2, arm, stage["merge_arm"], training)
    return z


def model_forward(image, params: dict, cfg: ModelConfig, training: bool = False,
                  arm: ARMConfig | None = None, taps: Taps | None = None) -> Tensor:
    """Logits (B, num_classes): embed, stages, token mean pool, linear head."""
    z = forward_features(image, params, cfg, training, arm, taps)
    z = layer_norm(z, params["head"]["norm"]["weight"], params["head"]["norm"]["bias"])
    return linear(mean(z, axis=1), params["head"]["fc"]["weight"], params["head"]["fc"]["bias"])
