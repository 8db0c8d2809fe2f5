"""Small neural-network layer kit on top of the autodiff tensor engine.

Modules track their parameters by attribute walk, so checkpointing and
freezing work off stable dotted names (e.g. "enc.0.res.conv1.weight").
All constructors take an explicit numpy Generator: two builds from the
same seed produce bit-identical parameters.
"""

from __future__ import annotations

from typing import Iterator, List, Optional, Tuple

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, concat, conv2d, group_norm, linear, softmax


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}" if not prefix else f"{prefix}.{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    """y = x W^T + b, optionally carrying a low-rank adapter (see denoiser)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False):
        self.d_in = d_in
        self.d_out = d_out
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None
        self.adapter = None  # set by denoiser.attach_lora

    def __call__(self, x: Tensor) -> Tensor:
        out = linear(x, self.weight, self.bias)
        if self.adapter is not None:
            out = out + self.adapter.delta(x)
        return out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int = 0, bias: bool = True,
                 zero_init: bool = False):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((c_out, c_in, k, k))
        else:
            w = rng.standard_normal((c_out, c_in, k, k)) * np.sqrt(2.0 / (c_in * k * k))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, stride=self.stride, padding=self.padding,
                      bias=self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int = 8, eps: float = 1e-5):
        g = groups
        while channels % g:
            g //= 2
        self.groups = max(g, 1)
        self.eps = eps
        self.weight = parameter(np.ones(channels))
        self.bias = parameter(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return group_norm(x, self.groups, self.weight, self.bias, eps=self.eps)


class SelfAttention2d(Module):
    """Single-head self-attention over the spatial grid, with residual."""

    def __init__(self, channels: int, rng: np.random.Generator):
        self.channels = channels
        self.norm = GroupNorm(channels)
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng, zero_init=True)

    def __call__(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        tokens = self.norm(x).reshape(n, c, h * w).transpose(0, 2, 1)
        q, k, v = self.q(tokens), self.k(tokens), self.v(tokens)
        attn = softmax((q @ k.transpose(0, 2, 1)) * (1.0 / np.sqrt(c)), axis=-1)
        out = self.proj(attn @ v)
        return x + out.transpose(0, 2, 1).reshape(n, c, h, w)


class ResBlock(Module):
    """norm -> silu -> conv, with optional additive time conditioning."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 time_dim: Optional[int] = None):
        self.norm1 = GroupNorm(c_in)
        self.conv1 = Conv2d(c_in, c_out, 3, rng, padding=1)
        self.time_proj = Linear(time_dim, c_out, rng) if time_dim else None
        self.norm2 = GroupNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, padding=1)
        self.skip = Conv2d(c_in, c_out, 1, rng) if c_in != c_out else None

    def __call__(self, x: Tensor, t_vec: Optional[Tensor] = None) -> Tensor:
        h = self.conv1(self.norm1(x).silu())
        if self.time_proj is not None:
            if t_vec is None:
                raise DimensionError("ResBlock built with time conditioning needs t_vec")
            n = t_vec.shape[0]
            h = h + self.time_proj(t_vec.silu()).reshape(n, -1, 1, 1)
        h = self.conv2(self.norm2(h).silu())
        skip = x if self.skip is None else self.skip(x)
        return skip + h


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Classic sin/cos positional features for integer timesteps, shape (N, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb.astype(np.float32)


__all__ = [
    "Module", "Linear", "Conv2d", "GroupNorm", "SelfAttention2d", "ResBlock",
    "parameter", "sinusoidal_embedding", "concat",
]
