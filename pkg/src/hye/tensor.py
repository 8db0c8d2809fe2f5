"""Dense float tensors with reverse-mode automatic differentiation.

A Tensor wraps a numpy array plus an optional tape node (parents and a
backward closure). Calling ``backward()`` on a scalar walks the recorded
graph in reverse topological order and accumulates gradients into every
tensor that requires them. Convolution is im2col + BLAS matmul so the
engine is fast enough to train the desk-scale denoiser on one CPU core.

Default dtype is float32; float64 tensors are supported (used by tests
to make finite-difference checks sharp) and ops preserve the input dtype.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from .errors import DimensionError, UsageError

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording (used during sampling)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        dtype=None,
        _parents: Tuple["Tensor", ...] = (),
        _backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None,
    ):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(_parents)
        self._backward = _backward

    def _on_tape(self) -> bool:
        return self.requires_grad or self._backward is not None

    # ------------------------------------------------------------------
    # basic introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise UsageError(f"non-finite values in {what}")
        return self

    # ------------------------------------------------------------------
    # autodiff engine
    # ------------------------------------------------------------------
    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(ancestor) into ``grad`` of every ancestor.

        Without an explicit seed, self must hold exactly one element.
        Repeated calls keep accumulating; call ``zero_grad`` to reset.
        """
        if seed is None:
            if self.data.size != 1:
                raise UsageError(
                    "backward() on a non-scalar tensor requires an explicit seed"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise DimensionError("seed shape must match tensor shape")

        # Iterative topological sort: graphs get deep at desk scale.
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p._on_tape():
                    stack.append((p, False))

        flows: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(topo):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent._on_tape():
                    continue
                acc = flows.get(id(parent))
                flows[id(parent)] = pg if acc is None else acc + pg

    # ------------------------------------------------------------------
    # helpers
    # ------------------------------------------------------------------
    @staticmethod
    def _wrap(x: ArrayLike, like: "Tensor") -> "Tensor":
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=like.data.dtype))

    def _make(self, data: np.ndarray, parents: Tuple["Tensor", ...], backward) -> "Tensor":
        on_tape = _grad_enabled and any(p._on_tape() for p in parents)
        return Tensor(
            np.asarray(data),
            requires_grad=False,
            dtype=None,
            _parents=parents if on_tape else (),
            _backward=backward if on_tape else None,
        )

    # ------------------------------------------------------------------
    # elementwise arithmetic
    # ------------------------------------------------------------------
    def __add__(self, other: ArrayLike) -> "Tensor":
        o = self._wrap(other, self)
        out_data = self.data + o.data

        def bwd(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, o.shape)

        return self._make(out_data, (self, o), bwd)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return self._make(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self + (-self._wrap(other, self))

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._wrap(other, self) + (-self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        o = self._wrap(other, self)
        out_data = self.data * o.data
        a_data, b_data = self.data, o.data

        def bwd(g):
            return _unbroadcast(g * b_data, self.shape), _unbroadcast(g * a_data, o.shape)

        return self._make(out_data, (self, o), bwd)

    __rmul__ = __mul__

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        o = self._wrap(other, self)
        out_data = self.data / o.data
        a_data, b_data = self.data, o.data

        def bwd(g):
            ga = _unbroadcast(g / b_data, self.shape)
            gb = _unbroadcast(-g * a_data / (b_data * b_data), o.shape)
            return ga, gb

        return self._make(out_data, (self, o), bwd)

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._wrap(other, self) / self

    def __pow__(self, p: float) -> "Tensor":
        out_data = self.data ** p
        x = self.data

        def bwd(g):
            return (g * p * x ** (p - 1),)

        return self._make(out_data, (self,), bwd)

    # ------------------------------------------------------------------
    # elementwise functions
    # ------------------------------------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return self._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self) -> "Tensor":
        x = self.data
        return self._make(np.log(x), (self,), lambda g: (g / x,))

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)
        return self._make(out_data, (self,), lambda g: (g / (2.0 * out_data),))

    def sigmoid(self) -> "Tensor":
        s = expit(self.data)

        def bwd(g):
            return (g * s * (1.0 - s),)

        return self._make(s.astype(self.data.dtype, copy=False), (self,), bwd)

    def silu(self) -> "Tensor":
        """x * sigmoid(x), the smooth gate used throughout the denoiser."""
        s = expit(self.data).astype(self.data.dtype, copy=False)
        x = self.data
        out_data = x * s

        def bwd(g):
            return (g * (s + x * s * (1.0 - s)),)

        return self._make(out_data, (self,), bwd)

    def tanh(self) -> "Tensor":
        t = np.tanh(self.data)
        return self._make(t, (self,), lambda g: (g * (1.0 - t * t),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return self._make(self.data * mask, (self,), lambda g: (g * mask,))

    # ------------------------------------------------------------------
    # reductions and shape ops
    # ------------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        in_shape = self.shape

        def bwd(g):
            if axis is None:
                return (np.broadcast_to(g, in_shape).astype(g.dtype, copy=False),)
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            gg = g
            if not keepdims:
                for a in sorted(a % len(in_shape) for a in ax):
                    gg = np.expand_dims(gg, a)
            return (np.broadcast_to(gg, in_shape).astype(g.dtype, copy=False),)

        return self._make(np.asarray(out_data), (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in ax]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape
        out_data = self.data.reshape(shape)
        return self._make(out_data, (self,), lambda g: (g.reshape(in_shape),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        out_data = self.data.transpose(axes)
        return self._make(out_data, (self,), lambda g: (g.transpose(inv),))

    def upsample2x(self) -> "Tensor":
        """Nearest-neighbour 2x upsampling of an (N, C, H, W) tensor."""
        if self.ndim != 4:
            raise DimensionError("upsample2x expects an (N, C, H, W) tensor")
        out_data = self.data.repeat(2, axis=2).repeat(2, axis=3)
        n, c, h, w = self.shape

        def bwd(g):
            return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

        return self._make(out_data, (self,), bwd)

    # ------------------------------------------------------------------
    # matmul
    # ------------------------------------------------------------------
    def __matmul__(self, other: "Tensor") -> "Tensor":
        o = self._wrap(other, self)
        a, b = self.data, o.data
        if a.ndim < 2 or b.ndim < 2:
            raise DimensionError("matmul requires >=2-D operands")
        if a.shape[-1] != b.shape[-2]:
            raise DimensionError(
                f"matmul inner dims disagree: {a.shape} @ {b.shape}"
            )
        if a.ndim != b.ndim and not (a.ndim == 2 or b.ndim == 2):
            raise DimensionError("matmul batch ranks must match (or one side be 2-D)")
        out_data = a @ b

        def bwd(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return self._make(out_data, (self, o), bwd)


# ----------------------------------------------------------------------
# free-function ops
# ----------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out_data = np.concatenate(datas, axis=axis)
    sizes = [d.shape[axis] for d in datas]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    ref = tensors[0]
    return ref._make(out_data, tuple(tensors), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    # shift-invariant: the detached max changes nothing about the gradient
    shifted = x + Tensor(-x.data.max(axis=axis, keepdims=True), dtype=x.dtype)
    e = shifted.exp()
    return e / e.sum(axis=axis, keepdims=True)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """x[N, d_in] @ weight[d_out, d_in]^T + bias[d_out]."""
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(
            f"linear: input dim {x.shape[-1]} != weight dim {weight.shape[1]}"
        )
    a, w = x.data, weight.data
    out_data = a @ w.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError("linear: bias shape must be (d_out,)")
        out_data = out_data + bias.data

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        a2 = a.reshape(-1, a.shape[-1])
        gx = (g @ w).reshape(a.shape)
        gw = g2.T @ a2
        gb = None if bias is None else g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return x._make(out_data, parents, bwd)


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (N*ho*wo, C*k*k) patch matrix (copies)."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # (N, C, ho, wo, k, k)
    n, c = xp.shape[0], xp.shape[1]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return np.ascontiguousarray(col)


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
           bias: Optional[Tensor] = None) -> Tensor:
    """Cross-correlation of (N, C_in, H, W) with (C_out, C_in, k, k)."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kh != kw:
        raise DimensionError("conv2d supports square kernels only")
    if kc != c_in:
        raise DimensionError(
            f"conv2d: input has {c_in} channels, kernel expects {kc}"
        )
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    k = kh
    if k > h + 2 * padding or k > w + 2 * padding:
        raise DimensionError("conv2d: kernel larger than padded input")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    col = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = col @ wmat.T  # (N*ho*wo, c_out)
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError("conv2d: bias shape must be (c_out,)")
        out = out + bias.data
    out_data = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)
    hp, wp = xp.shape[2], xp.shape[3]

    def bwd(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c_out)
        gw = (g2.T @ col).reshape(c_out, c_in, k, k)
        gcol = g2 @ wmat  # (N*ho*wo, C*k*k)
        gcol6 = gcol.reshape(n, ho, wo, c_in, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((n, c_in, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                    gcol6[:, :, :, :, i, j]
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w]
        gb = None if bias is None else g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return x._make(out_data, parents, bwd)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance per (sample, group), then per-channel affine."""
    if x.ndim != 4:
        raise DimensionError("group_norm expects an (N, C, H, W) tensor")
    n, c, h, w = x.shape
    if c % num_groups != 0:
        raise DimensionError(f"channels {c} not divisible by groups {num_groups}")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError("group_norm: affine params must have shape (C,)")
    g = x.reshape(n, num_groups, (c // num_groups) * h * w)
    mu = g.mean(axis=2, keepdims=True)
    centered = g - mu
    var = (centered * centered).mean(axis=2, keepdims=True)
    xhat = centered / (var + eps).sqrt()
    xhat = xhat.reshape(n, c, h, w)
    gamma4 = gamma.reshape(1, c, 1, 1)
    beta4 = beta.reshape(1, c, 1, 1)
    return xhat * gamma4 + beta4


def mse(a: Tensor, b: Tensor) -> Tensor:
    d = a - b
    return (d * d).mean()


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
              h: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-4) -> bool:
    """Central finite-difference check of ``fn`` (scalar output) at ``inputs``.

    Perturbs every element of every requires_grad input; returns True when
    all analytic gradients match the finite differences within tolerance.
    """
    loss = fn(*inputs)
    if loss.size != 1:
        raise UsageError("gradcheck expects a scalar-valued function")
    for t in inputs:
        t.zero_grad()
    loss.backward()
    for t in inputs:
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        ana = (np.zeros_like(t.data) if t.grad is None else t.grad).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp = fn(*inputs).item()
            flat[i] = orig - h
            lm = fn(*inputs).item()
            flat[i] = orig
            num = (lp - lm) / (2.0 * h)
            if abs(num - ana[i]) > atol + rtol * max(abs(num), abs(ana[i])):
                return False
    return True
