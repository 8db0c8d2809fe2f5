"""Conditional U-Net noise predictor.

The backbone is a small encoder/decoder with additive time conditioning,
single-head self-attention at the deepest stages and the bottleneck, and
skip connections. A control branch mirrors the encoder, consumes the
65-channel condition through an input conv expanded from 3 channels by
averaged replication, and emits one zero-initialized residual per encoder
stage plus one for the bottleneck. Zero init makes the conditional and
unconditional predictions bit-identical at attach time.

LoRA adapters ride on the attention projection linears: forward becomes
x (W + scale * B A)^T with B zero-initialized, so attaching never changes
outputs until training moves B.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from . import nn
from .data_pipeline import ConditionTensor
from .errors import ConfigurationError, DimensionError
from .nn import Conv2d, GroupNorm, Linear, Module, ResBlock, SelfAttention2d
from .tensor import Tensor, concat


@dataclass
class DenoiserConfig:
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 64
    cond_channels: int = 65
    image_channels: int = 1
    attn_stages: Optional[Tuple[int, ...]] = None  # default: deepest stage only

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigurationError("depth must be >= 1")
        for name in ("base_channels", "time_embed_dim", "image_channels"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.cond_channels < 0:
            raise ConfigurationError("cond_channels must be >= 0")
        if self.attn_stages is None:
            self.attn_stages = (self.depth - 1,)
        bad = [s for s in self.attn_stages if not 0 <= s < self.depth]
        if bad:
            raise ConfigurationError(f"attention stages {bad} outside [0, depth)")

    def stage_channels(self) -> List[int]:
        return [self.base_channels * (2 ** i) for i in range(self.depth + 1)]


class EncoderStage(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, attn: bool,
                 rng: np.random.Generator):
        self.res = ResBlock(c_in, c_in, rng, time_dim=time_dim)
        self.attn = SelfAttention2d(c_in, rng) if attn else None
        self.down = Conv2d(c_in, c_out, 3, rng, stride=2, padding=1)


class DecoderStage(Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, attn: bool,
                 rng: np.random.Generator):
        self.up = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.res = ResBlock(2 * c_out, c_out, rng, time_dim=time_dim)
        self.attn = SelfAttention2d(c_out, rng) if attn else None


class ControlBranch(Module):
    """Encoder mirror over the condition tensor; one zero-init projection
    per injection point (each encoder stage output, then the bottleneck)."""

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        ch = config.stage_channels()
        conv_in = Conv2d(3, ch[0], 3, rng, padding=1)
        expand_input_channels(conv_in, config.cond_channels)
        self.conv_in = conv_in
        self.stages = [
            ResBlock(ch[i], ch[i], rng, time_dim=None) for i in range(config.depth)
        ]
        self.downs = [
            Conv2d(ch[i], ch[i + 1], 3, rng, stride=2, padding=1)
            for i in range(config.depth)
        ]
        self.mid = ResBlock(ch[-1], ch[-1], rng, time_dim=None)
        self.projs = [
            Conv2d(ch[i], ch[i], 1, rng, zero_init=True)
            for i in range(config.depth)
        ] + [Conv2d(ch[-1], ch[-1], 1, rng, zero_init=True)]

    def __call__(self, cond: Tensor) -> List[Tensor]:
        h = self.conv_in(cond)
        residuals = []
        for stage, down, proj in zip(self.stages, self.downs, self.projs):
            h = stage(h)
            residuals.append(proj(h))
            h = down(h)
        h = self.mid(h)
        residuals.append(self.projs[-1](h))
        return residuals


class Denoiser(Module):
    def __init__(self, config: DenoiserConfig, rng: np.random.Generator):
        self.config = config
        ch = config.stage_channels()
        td = config.time_embed_dim
        self.time_fc1 = Linear(td, td, rng)
        self.time_fc2 = Linear(td, td, rng)
        self.conv_in = Conv2d(config.image_channels, ch[0], 3, rng, padding=1)
        self.enc = [
            EncoderStage(ch[i], ch[i + 1], td, i in config.attn_stages, rng)
            for i in range(config.depth)
        ]
        self.mid1 = ResBlock(ch[-1], ch[-1], rng, time_dim=td)
        self.mid_attn = SelfAttention2d(ch[-1], rng)
        self.mid2 = ResBlock(ch[-1], ch[-1], rng, time_dim=td)
        self.dec = [
            DecoderStage(ch[i + 1], ch[i], td, i in config.attn_stages, rng)
            for i in reversed(range(config.depth))
        ]
        self.norm_out = GroupNorm(ch[0])
        self.conv_out = Conv2d(ch[0], config.image_channels, 3, rng, padding=1,
                               zero_init=True)
        self.control = ControlBranch(config, rng) if config.cond_channels else None

    # ------------------------------------------------------------------
    def _time_vector(self, t: Union[int, np.ndarray], n: int) -> Tensor:
        t_arr = np.full(n, t, dtype=np.int64) if np.isscalar(t) else np.asarray(t)
        if t_arr.shape != (n,):
            raise DimensionError(f"need one timestep per sample, got {t_arr.shape}")
        emb = Tensor(nn.sinusoidal_embedding(t_arr, self.config.time_embed_dim))
        return self.time_fc2(self.time_fc1(emb).silu())

    def __call__(self, x_t: Tensor, t: Union[int, np.ndarray],
                 residuals: Optional[Sequence[Tensor]] = None) -> Tensor:
        cfg = self.config
        n, c, h, w = x_t.shape
        if c != cfg.image_channels:
            raise DimensionError(
                f"input has {c} channels, model expects {cfg.image_channels}"
            )
        factor = 2 ** cfg.depth
        if h % factor or w % factor:
            raise ConfigurationError(
                f"spatial size {h}x{w} not divisible by 2^depth = {factor}"
            )
        t_vec = self._time_vector(t, n)
        x = self.conv_in(x_t)
        skips = []
        for i, stage in enumerate(self.enc):
            x = stage.res(x, t_vec)
            if stage.attn is not None:
                x = stage.attn(x)
            if residuals is not None:
                x = x + residuals[i]
            skips.append(x)
            x = stage.down(x)
        if residuals is not None:
            x = x + residuals[cfg.depth]
        x = self.mid2(self.mid_attn(self.mid1(x, t_vec)), t_vec)
        for stage, skip in zip(self.dec, reversed(skips)):
            x = stage.up(x.upsample2x())
            x = stage.res(concat([x, skip], axis=1), t_vec)
            if stage.attn is not None:
                x = stage.attn(x)
        return self.conv_out(self.norm_out(x).silu())

    def attention_linears(self) -> List[Tuple[str, Linear]]:
        """All attention projection layers, in stable name order."""
        out = []
        blocks: List[Tuple[str, SelfAttention2d]] = []
        for i, stage in enumerate(self.enc):
            if stage.attn is not None:
                blocks.append((f"enc.{i}.attn", stage.attn))
        blocks.append(("mid_attn", self.mid_attn))
        for i, stage in enumerate(self.dec):
            if stage.attn is not None:
                blocks.append((f"dec.{i}.attn", stage.attn))
        for bname, blk in blocks:
            for lname in ("q", "k", "v", "proj"):
                out.append((f"{bname}.{lname}", getattr(blk, lname)))
        return out


class LoraAdapter(Module):
    """Low-rank increment W' = W + scale * B A on a host linear layer."""

    def __init__(self, d_out: int, d_in: int, rank: int, scale: float,
                 rng: np.random.Generator):
        if rank < 1 or rank > min(d_out, d_in):
            raise ConfigurationError(
                f"rank {rank} outside [1, min({d_out}, {d_in})]"
            )
        self.rank = rank
        self.scale = scale
        self.A = nn.parameter(rng.standard_normal((rank, d_in)) / np.sqrt(d_in))
        self.B = nn.parameter(np.zeros((d_out, rank)))

    def delta(self, x: Tensor) -> Tensor:
        from .tensor import linear

        return linear(linear(x, self.A), self.B) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


def build_denoiser(config: DenoiserConfig, rng: np.random.Generator) -> Denoiser:
    return Denoiser(config, rng)


def expand_input_channels(layer: Conv2d, c_new: int) -> Conv2d:
    """Widen a conv input from c_old to c_new channels by replacing every
    input slice with the mean of the original slices."""
    c_old = layer.c_in
    if c_new < c_old or c_old < 1:
        raise ConfigurationError(f"cannot expand {c_old} channels to {c_new}")
    w = layer.weight.data
    mean = w.mean(axis=1, keepdims=True)
    layer.weight = nn.parameter(np.repeat(mean, c_new, axis=1))
    layer.c_in = c_new
    return layer


def predict_noise(x_t: Tensor, t: Union[int, np.ndarray],
                  cond: Optional[Union[Tensor, ConditionTensor, np.ndarray]],
                  model: Denoiser,
                  control: Optional[ControlBranch] = None) -> Tensor:
    """Noise prediction; conditional when cond is given, backbone-only otherwise."""
    residuals = None
    if cond is not None:
        branch = control if control is not None else model.control
        if branch is None:
            raise ConfigurationError("model built without a control branch")
        if isinstance(cond, ConditionTensor):
            cond = cond.data
        if isinstance(cond, np.ndarray):
            if cond.ndim == 3:
                cond = cond[None]
            cond = Tensor(np.ascontiguousarray(cond, dtype=np.float32))
        if cond.ndim != 4 or cond.shape[1] != model.config.cond_channels:
            raise DimensionError(
                f"condition must be (N, {model.config.cond_channels}, H, W), "
                f"got {cond.shape}"
            )
        if cond.shape[2:] != x_t.shape[2:]:
            raise DimensionError("condition spatial size must match x_t")
        if cond.shape[0] != x_t.shape[0]:
            if cond.shape[0] == 1:
                cond = Tensor(np.repeat(cond.data, x_t.shape[0], axis=0))
            else:
                raise DimensionError("condition batch size must match x_t")
        residuals = branch(cond)
    return model(x_t, t, residuals)


def attach_lora(layer: Linear, rank: int, scale: float = 1.0,
                rng: Optional[np.random.Generator] = None) -> LoraAdapter:
    if not isinstance(layer, Linear):
        raise ConfigurationError("LoRA targets linear layers")
    if rng is None:
        rng = np.random.default_rng(0)
    adapter = LoraAdapter(layer.d_out, layer.d_in, rank, scale, rng)
    layer.adapter = adapter
    return adapter


def attach_lora_to_attention(model: Denoiser, rank: int, scale: float = 1.0,
                             rng: Optional[np.random.Generator] = None
                             ) -> List[LoraAdapter]:
    if rng is None:
        rng = np.random.default_rng(0)
    return [attach_lora(layer, rank, scale, rng)
            for _, layer in model.attention_linears()]


def merge_lora(layer: Linear) -> Linear:
    """Bake the adapter into the host weight and detach it."""
    if layer.adapter is None:
        raise ConfigurationError("layer has no adapter to merge")
    merged = layer.weight.data + layer.adapter.delta_weight().astype(np.float32)
    layer.weight = nn.parameter(merged)
    layer.adapter = None
    return layer


def trainable_parameters(model: Denoiser, mode: str = "full") -> List[Tuple[str, Tensor]]:
    """Parameter selection: 'full' takes everything; 'lora_and_control' takes
    exactly the LoRA A/B tensors and the control branch."""
    named = list(model.named_parameters())
    if mode == "full":
        return named
    if mode == "lora_and_control":
        return [(n, p) for n, p in named
                if ".adapter." in n or n.startswith("control.")]
    raise ConfigurationError(f"unknown parameter mode {mode!r}")
