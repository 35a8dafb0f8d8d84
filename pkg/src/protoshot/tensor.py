"""Dense float tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation stores a backward closure on its
output and ``Tensor.backward()`` replays the closures in reverse topological
order. Arrays are float32 by default; float64 inputs propagate through every
operation so numeric test oracles can run at higher precision.

Broadcasting is deliberately restricted to bias addition (a 1-D vector added
to the rows of a matrix or to the channels of a feature map). Everything else
requires exact shape agreement.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in _FLOAT_DTYPES:
        return arr.astype(np.float32)
    return arr


class Tensor:
    """N-dimensional float array participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Reductions and shape ops as methods; everything else lives at module level.
    def sum(self) -> "Tensor":
        return _sum_all(self)

    def mean(self) -> "Tensor":
        return _mean_all(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other):
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _wire(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable[[], None]) -> Tensor:
    """Attach graph edges to ``out`` iff some parent participates in autodiff."""
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise and matrix operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias against rows or channels."""
    if a.shape == b.shape:
        mode = "same"
        data = a.data + b.data
    elif b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]:
        mode = "row_bias"
        data = a.data + b.data[None, :]
    elif b.ndim == 1 and a.ndim == 4 and a.shape[1] == b.shape[0]:
        mode = "channel_bias"
        data = a.data + b.data[None, :, None, None]
    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(data)

    def _backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            if mode == "same":
                b.accumulate_grad(g)
            elif mode == "row_bias":
                b.accumulate_grad(g.sum(axis=0))
            else:
                b.accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _wire(out, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data - b.data)

    def _backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad)
        if b.requires_grad:
            b.accumulate_grad(-out.grad)

    return _wire(out, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data * b.data)

    def _backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * b.data)
        if b.requires_grad:
            b.accumulate_grad(out.grad * a.data)

    return _wire(out, (a, b), _backward)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def _backward():
        if a.requires_grad:
            a.accumulate_grad(out.grad * s)

    return _wire(out, (a,), _backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape[1]} != {b.shape[0]}")
    out = Tensor(a.data @ b.data)

    def _backward():
        g = out.grad
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g)

    return _wire(out, (a, b), _backward)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > 0))

    return _wire(out, (x,), _backward)


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad / x.data)

    return _wire(out, (x,), _backward)


def exp(x: Tensor) -> Tensor:
    out = Tensor(np.exp(x.data))

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * out.data)

    return _wire(out, (x,), _backward)


def sqrt(x: Tensor) -> Tensor:
    out = Tensor(np.sqrt(x.data))

    def _backward():
        if x.requires_grad:
            # zero subgradient at the origin keeps gradients finite
            safe = np.where(out.data > 0, out.data, 1.0)
            x.accumulate_grad(np.where(out.data > 0, out.grad / (2.0 * safe), 0.0))

    return _wire(out, (x,), _backward)


def clip_min(x: Tensor, floor: float) -> Tensor:
    """Elementwise maximum against a constant; clamped entries get zero grad."""
    out = Tensor(np.maximum(x.data, floor))

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad * (x.data > floor))

    return _wire(out, (x,), _backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(out.grad.reshape(x.shape))

    return _wire(out, (x,), _backward)


def _sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad, x.shape))

    return _wire(out, (x,), _backward)


def _mean_all(x: Tensor) -> Tensor:
    n = x.size
    out = Tensor(x.data.mean())

    def _backward():
        if x.requires_grad:
            x.accumulate_grad(np.broadcast_to(out.grad / n, x.shape))

    return _wire(out, (x,), _backward)


def take(x: Tensor, index) -> Tensor:
    """Select a single element as a scalar tensor."""
    idx = tuple(np.atleast_1d(index)) if not isinstance(index, tuple) else index
    probe = np.zeros(x.shape, dtype=bool)
    try:
        probe[idx] = True
    except IndexError as exc:
        raise ShapeError(f"take: index {idx} out of range for shape {x.shape}") from exc
    if probe.sum() != 1:
        raise ShapeError(f"take: index {idx} does not address a single element of {x.shape}")
    out = Tensor(x.data[idx])

    def _backward():
        if x.requires_grad:
            g = np.zeros_like(x.data)
            g[idx] = out.grad
            x.accumulate_grad(g)

    return _wire(out, (x,), _backward)


def log_softmax(x: Tensor) -> Tensor:
    """Row-wise log-softmax of a 2-D tensor, computed with a max shift."""
    if x.ndim != 2:
        raise ShapeError(f"log_softmax: expects a 2-D tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = Tensor(shifted - lse)

    def _backward():
        if x.requires_grad:
            g = out.grad
            softmax = np.exp(out.data)
            x.accumulate_grad(g - softmax * g.sum(axis=1, keepdims=True))

    return _wire(out, (x,), _backward)


def pairwise_sq_dist(q: Tensor, p: Tensor) -> Tensor:
    """Squared Euclidean distances between rows of q (M,H) and rows of p (K,H)."""
    if q.ndim != 2 or p.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist: expects 2-D operands, got {q.shape} and {p.shape}")
    if q.shape[1] != p.shape[1]:
        raise ShapeError(
            f"pairwise_sq_dist: vector length mismatch, {q.shape[1]} != {p.shape[1]}"
        )
    diff = q.data[:, None, :] - p.data[None, :, :]  # (M, K, H)
    out = Tensor((diff * diff).sum(axis=2))

    def _backward():
        g = out.grad[:, :, None]
        if q.requires_grad:
            q.accumulate_grad((2.0 * diff * g).sum(axis=1))
        if p.requires_grad:
            p.accumulate_grad((-2.0 * diff * g).sum(axis=0))

    return _wire(out, (q, p), _backward)


# ---------------------------------------------------------------------------
# spatial operations


def _as_batched_4d(x: Tensor, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x.data, False
    if x.ndim == 3:
        return x.data[None], True
    raise ShapeError(f"{op}: expects a (C,H,W) or (N,C,H,W) tensor, got shape {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of a (possibly batched) multi-channel image.

    ``x`` is (C_in,H,W) or (N,C_in,H,W); ``kernel`` is (C_out,C_in,kh,kw).
    Output spatial extents follow floor((extent + 2*padding - k)/stride) + 1.
    """
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D (C_out,C_in,kh,kw), got shape {kernel.shape}")
    xd, squeezed = _as_batched_4d(x, "conv2d")
    n, c_in, h, w = xd.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"conv2d: kernel expects {kc} input channels, input has {c_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d: kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d: kernel width {kw} exceeds padded input width {wp}")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    data = np.einsum("nchwkl,ockl->nohw", windows, kernel.data, optimize=True)
    oh, ow = data.shape[2], data.shape[3]
    out = Tensor(data[0] if squeezed else data)

    def _backward():
        g = out.grad[None] if squeezed else out.grad
        if kernel.requires_grad:
            kernel.accumulate_grad(np.einsum("nchwkl,nohw->ockl", windows, g, optimize=True))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            kd = kernel.data
            for ki in range(kh):
                for kj in range(kw):
                    contrib = np.einsum("nohw,oc->nchw", g, kd[:, :, ki, kj])
                    dxp[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += contrib
            dx = dxp[:, :, padding : padding + h, padding : padding + w]
            x.accumulate_grad(dx[0] if squeezed else dx)

    return _wire(out, (x, kernel), _backward)


def max_pool2d(x: Tensor, window: int) -> Tensor:
    """Non-overlapping max pooling; gradient routes to the first max in row-major order."""
    if window < 1:
        raise ShapeError(f"max_pool2d: window must be >= 1, got {window}")
    xd, squeezed = _as_batched_4d(x, "max_pool2d")
    n, c, h, w = xd.shape
    if h % window or w % window:
        raise ShapeError(
            f"max_pool2d: spatial extents ({h},{w}) not divisible by window {window}"
        )
    oh, ow = h // window, w // window
    tiles = (
        xd.reshape(n, c, oh, window, ow, window)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, window * window)
    )
    argmax = tiles.argmax(axis=-1)
    data = np.take_along_axis(tiles, argmax[..., None], axis=-1)[..., 0]
    out = Tensor(data[0] if squeezed else data)

    def _backward():
        if not x.requires_grad:
            return
        g = out.grad[None] if squeezed else out.grad
        dt = np.zeros_like(tiles)
        np.put_along_axis(dt, argmax[..., None], g[..., None], axis=-1)
        dx = (
            dt.reshape(n, c, oh, ow, window, window)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        x.accumulate_grad(dx[0] if squeezed else dx)

    return _wire(out, (x,), _backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map x @ weight.T + bias for x (N,d_in), weight (d_out,d_in), bias (d_out,)."""
    if x.ndim != 2:
        raise ShapeError(f"linear: input must be 2-D, got shape {x.shape}")
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-D, got shape {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[1]} != weight features {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = Tensor(x.data @ weight.data.T + bias.data[None, :])

    def _backward():
        g = out.grad
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data)
        if weight.requires_grad:
            weight.accumulate_grad(g.T @ x.data)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _wire(out, (x, weight, bias), _backward)


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max relative error between analytic and central-difference gradients.

    The analytic gradient is computed in the dtype of ``x``; the numeric
    baseline always runs in float64. Relative error per coordinate is
    |analytic - numeric| / max(1, |numeric|).
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be positive, got {eps}")
    xi = Tensor(x.data.copy(), requires_grad=True, dtype=x.dtype)
    y = f(xi)
    if y.size != 1:
        raise ShapeError(f"finite_diff_check: f must return a scalar, got shape {y.shape}")
    if not np.isfinite(y.data).all():
        raise NumericalError("finite_diff_check: f(x) is not finite")
    y.backward()
    analytic = xi.grad if xi.grad is not None else np.zeros_like(xi.data)

    base = x.data.astype(np.float64).ravel()
    numeric = np.zeros_like(base)
    for i in range(base.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            shifted = base.copy()
            shifted[i] += sign * eps
            val = f(Tensor(shifted.reshape(x.shape), dtype=np.float64)).item()
            if slot == 0:
                f_plus = val
            else:
                f_minus = val
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    err = np.abs(analytic.astype(np.float64).ravel() - numeric)
    return float((err / np.maximum(1.0, np.abs(numeric))).max())
