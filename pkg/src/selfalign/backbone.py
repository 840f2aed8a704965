"""Patchified transformer backbone with adaptive layer-norm conditioning.

The architecture follows the standard diffusion-transformer recipe: images are
cut into non-overlapping patches, embedded, summed with fixed 2-D sin-cos
positions, and run through pre-norm blocks whose layer norms are modulated by
shift/scale/gate vectors regressed from the timestep + class embedding. The
modulation projections and the output head start at zero so an untrained
model predicts zeros.

Intermediate-layer token activations ("taps") can be returned from any block,
and a forward pass can stop early when only taps up to some layer are needed
(the teacher pass and feature extraction both use this).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_height: int = 16
    input_width: int = 16
    channels: int = 1
    patch_size: int = 2
    depth: int = 6
    hidden_dim: int = 128
    num_heads: int = 4
    num_classes: int = 4
    label_dropout_prob: float = 0.1
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.input_height % self.patch_size or self.input_width % self.patch_size:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} not divisible by patch size {self.patch_size}"
            )
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.depth < 2:
            raise ValueError("depth must be at least 2 (alignment needs two distinct layers)")
        if not 0.0 <= self.label_dropout_prob <= 1.0:
            raise ValueError("label_dropout_prob must lie in [0, 1]")

    @property
    def num_patches(self) -> int:
        return (self.input_height // self.patch_size) * (self.input_width // self.patch_size)

    @property
    def null_class_id(self) -> int:
        """Label id reserved for the unconditional embedding."""
        return self.num_classes


PRESETS = {
    "tiny": dict(depth=6, hidden_dim=128, num_heads=4),
    "small": dict(depth=12, hidden_dim=256, num_heads=8),
}


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; options: {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# Patch <-> image reshaping
# ---------------------------------------------------------------------------


def patchify(images: Tensor, patch_size: int) -> Tensor:
    """[B, C, H, W] -> [B, N, C*p*p], patches in row-major order."""
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, c, h // p, p, w // p, p)
    x = x.permute(0, 2, 4, 1, 3, 5)  # [B, H/p, W/p, C, p, p]
    return x.reshape(b, (h // p) * (w // p), c * p * p)


def unpatchify(tokens: Tensor, patch_size: int, channels: int, height: int, width: int) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    b, n, d = tokens.shape
    p = patch_size
    gh, gw = height // p, width // p
    if n != gh * gw or d != channels * p * p:
        raise ValueError(f"token tensor [{n}, {d}] does not match a {height}x{width}/{p} grid")
    x = tokens.reshape(b, gh, gw, channels, p, p)
    x = x.permute(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / (10000.0 ** (np.arange(dim // 2, dtype=np.float64) / (dim // 2)))
    out = np.einsum("p,f->pf", positions.astype(np.float64), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_position_embedding(dim: int, grid_h: int, grid_w: int) -> Tensor:
    """Fixed 2-D sin-cos embedding, [grid_h*grid_w, dim]."""
    if dim % 4:
        raise ValueError("position embedding dim must be divisible by 4")
    ys, xs = np.meshgrid(np.arange(grid_h), np.arange(grid_w), indexing="ij")
    emb = np.concatenate(
        [_sincos_1d(dim // 2, ys.reshape(-1)), _sincos_1d(dim // 2, xs.reshape(-1))], axis=1
    )
    return torch.from_numpy(emb).float()


# ---------------------------------------------------------------------------
# Conditioning
# ---------------------------------------------------------------------------


class TimestepEmbedder(nn.Module):
    """Sinusoidal frequency features of t lifted through a two-layer MLP."""

    def __init__(self, hidden_dim: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(
            nn.Linear(freq_dim, hidden_dim),
            nn.SiLU(),
            nn.Linear(hidden_dim, hidden_dim),
        )

    def frequency_embedding(self, t: Tensor) -> Tensor:
        half = self.freq_dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=t.dtype, device=t.device) / half
        )
        args = t.reshape(-1, 1) * freqs.reshape(1, -1)
        return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)

    def forward(self, t: Tensor) -> Tensor:
        return self.mlp(self.frequency_embedding(t))


class LabelEmbedder(nn.Module):
    """Class-id embedding table with one extra row for the null (unconditional) id.

    Dropout of labels happens outside the model (see :func:`apply_label_dropout`)
    so that the student and teacher can share one dropped label batch.
    """

    def __init__(self, num_classes: int, hidden_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.table = nn.Embedding(num_classes + 1, hidden_dim)

    def forward(self, class_ids: Tensor) -> Tensor:
        if bool((class_ids < 0).any()) or bool((class_ids > self.num_classes).any()):
            raise ValueError(f"class ids must lie in [0, {self.num_classes}] (null id included)")
        return self.table(class_ids)


def apply_label_dropout(class_ids: Tensor, prob: float, null_id: int, generator: torch.Generator) -> Tensor:
    """Independently replace each label with the null id with probability ``prob``.

    Always consumes one uniform draw per label so that different dropout
    probabilities leave the rng stream aligned.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("dropout probability must lie in [0, 1]")
    u = torch.rand(class_ids.shape[0], generator=generator, dtype=torch.float64)
    return torch.where(u < prob, torch.full_like(class_ids, null_id), class_ids)


# ---------------------------------------------------------------------------
# Transformer blocks
# ---------------------------------------------------------------------------


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.proj(out)


class Block(nn.Module):
    """Pre-norm attention + MLP block with conditioning-driven shift/scale/gate."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(approximate="tanh"),
            nn.Linear(hidden, dim),
        )
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 6 * dim))

    def forward(self, x: Tensor, cond: Tensor) -> tuple[Tensor, Tensor]:
        """Returns (block output, un-gated MLP branch output)."""
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.modulation(cond).chunk(6, dim=1)
        x = x + gate_a.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_a, scale_a))
        branch = self.mlp(modulate(self.norm2(x), shift_m, scale_m))
        x = x + gate_m.unsqueeze(1) * branch
        return x, branch


class FinalLayer(nn.Module):
    def __init__(self, dim: int, patch_size: int, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-6)
        self.linear = nn.Linear(dim, patch_size * patch_size * channels)
        self.modulation = nn.Sequential(nn.SiLU(), nn.Linear(dim, 2 * dim))

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        shift, scale = self.modulation(cond).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


TAP_POINTS = ("post_block", "pre_gate")


class DiffusionTransformer(nn.Module):
    """The denoiser/velocity network. ``forward`` maps (x_t, t, class_ids) to a
    field with the shape of x_t; ``forward_with_taps`` additionally returns
    residual-stream activations from requested blocks (1-indexed)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.patch_embed = nn.Linear(config.channels * config.patch_size**2, d)
        self.t_embedder = TimestepEmbedder(d)
        self.y_embedder = LabelEmbedder(config.num_classes, d)
        pos = sincos_position_embedding(
            d, config.input_height // config.patch_size, config.input_width // config.patch_size
        )
        self.pos_embed = nn.Parameter(pos.unsqueeze(0), requires_grad=False)
        self.blocks = nn.ModuleList(
            Block(d, config.num_heads, config.mlp_ratio) for _ in range(config.depth)
        )
        self.final_layer = FinalLayer(d, config.patch_size, config.channels)

    def condition(self, t: Tensor, class_ids: Tensor) -> Tensor:
        t = torch.as_tensor(t).to(self.pos_embed.dtype)  # denoise steps arrive as ints
        return self.t_embedder(t) + self.y_embedder(class_ids)

    def forward_with_taps(
        self,
        x: Tensor,
        t: Tensor,
        class_ids: Tensor,
        tap_layers: tuple[int, ...] = (),
        stop_after_layer: int | None = None,
        tap_point: str = "post_block",
    ) -> tuple[Tensor | None, dict[int, Tensor]]:
        cfg = self.config
        if tap_point not in TAP_POINTS:
            raise ValueError(f"tap_point must be one of {TAP_POINTS}")
        last = cfg.depth if stop_after_layer is None else stop_after_layer
        if not 1 <= last <= cfg.depth:
            raise ValueError(f"stop_after_layer {stop_after_layer} outside [1, {cfg.depth}]")
        wanted = set(tap_layers)
        if not wanted <= set(range(1, last + 1)):
            raise ValueError(f"tap layers {sorted(wanted)} outside [1, {last}]")

        if x.shape[1:] != (cfg.channels, cfg.input_height, cfg.input_width):
            raise ValueError(f"input shape {tuple(x.shape)} does not match config")
        cond = self.condition(t, class_ids)
        h = self.patch_embed(patchify(x, cfg.patch_size)) + self.pos_embed
        taps: dict[int, Tensor] = {}
        for i, block in enumerate(self.blocks[:last], start=1):
            h, branch = block(h, cond)
            if i in wanted:
                taps[i] = branch if tap_point == "pre_gate" else h
        if stop_after_layer is not None:
            return None, taps
        out = self.final_layer(h, cond)
        return unpatchify(out, cfg.patch_size, cfg.channels, cfg.input_height, cfg.input_width), taps

    def forward(self, x: Tensor, t: Tensor, class_ids: Tensor) -> Tensor:
        pred, _ = self.forward_with_taps(x, t, class_ids)
        return pred


# ---------------------------------------------------------------------------
# Deterministic initialization
# ---------------------------------------------------------------------------


def _xavier_uniform(weight: Tensor, generator: torch.Generator) -> None:
    fan_out, fan_in = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)


def init_parameters(model: DiffusionTransformer, generator: torch.Generator) -> None:
    """Initialize all weights from an explicit generator (global rng untouched).

    Linear weights are Xavier-uniform with zero bias; embedding tables and the
    timestep MLP use N(0, 0.02); every modulation projection and the output
    head start at zero so the initial prediction is exactly zero.
    """
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.Linear):
                _xavier_uniform(module.weight, generator)
                module.bias.zero_()
            elif isinstance(module, nn.Embedding):
                module.weight.normal_(0.0, 0.02, generator=generator)
        for linear in (model.t_embedder.mlp[0], model.t_embedder.mlp[2]):
            linear.weight.normal_(0.0, 0.02, generator=generator)
        for block in model.blocks:
            block.modulation[-1].weight.zero_()
            block.modulation[-1].bias.zero_()
        model.final_layer.modulation[-1].weight.zero_()
        model.final_layer.modulation[-1].bias.zero_()
        model.final_layer.linear.weight.zero_()
        model.final_layer.linear.bias.zero_()


def build_model(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> DiffusionTransformer:
    """Construct and deterministically initialize a backbone."""
    from .rng import make_generator

    model = DiffusionTransformer(config)
    init_parameters(model, make_generator(seed, "model-init"))
    return model.to(dtype)
