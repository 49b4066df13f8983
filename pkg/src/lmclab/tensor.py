"""Dense float64 tensors with dynamic reverse-mode differentiation.

The graph is rebuilt on every forward pass: each op wires a backward
closure into its output, and ``Tensor.backward()`` walks the tape once in
reverse topological order, accumulating gradients on every reachable
tensor that requires them. All math is float64 so numerical tolerances in
the invariant tests are not confounded by precision.

Only the ops the modular networks need are implemented: dense linear
algebra, 3x3-style convolutions, stride-2 transposed convolutions, 2x2
max-pooling, batch normalization, stable softmax variants and a fused
cross-entropy. There is no broadcasting beyond numpy semantics on the
elementwise ops, and no GPU path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ContractError, DegenerateBatchError, ParameterError, ShapeError

_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus optional gradient and backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic protocol -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from here.

        Only defined for scalar tensors; each graph node's closure runs
        exactly once, in reverse topological order.
        """
        if self.shape != ():
            raise ContractError(f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic -----------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        out = _node(self.data + other.data, (self, other))
        if out._parents:
            def bw(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g, other.shape))
            out._backward = bw
        return out

    __radd__ = __add__

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out._parents:
            out._backward = lambda g: self.accumulate_grad(-g)
        return out

    def __sub__(self, other):
        return self + (-_as_tensor(other))

    def __rsub__(self, other):
        return _as_tensor(other) + (-self)

    def __mul__(self, other):
        other = _as_tensor(other)
        out = _node(self.data * other.data, (self, other))
        if out._parents:
            a_data, b_data = self.data, other.data
            def bw(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g * b_data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(g * a_data, other.shape))
            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        out = _node(self.data / other.data, (self, other))
        if out._parents:
            a_data, b_data = self.data, other.data
            def bw(g):
                if self.requires_grad:
                    self.accumulate_grad(_unbroadcast(g / b_data, self.shape))
                if other.requires_grad:
                    other.accumulate_grad(_unbroadcast(-g * a_data / (b_data * b_data), other.shape))
            out._backward = bw
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __pow__(self, exponent: float):
        if not isinstance(exponent, (int, float)):
            raise ParameterError("only scalar exponents are supported")
        out = _node(self.data ** exponent, (self,))
        if out._parents:
            x = self.data
            out._backward = lambda g: self.accumulate_grad(g * exponent * x ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul needs [n,k]@[k,m], got {self.shape} @ {other.shape}")
        out = _node(self.data @ other.data, (self, other))
        if out._parents:
            a_data, b_data = self.data, other.data
            def bw(g):
                if self.requires_grad:
                    self.accumulate_grad(g @ b_data.T)
                if other.requires_grad:
                    other.accumulate_grad(a_data.T @ g)
            out._backward = bw
        return out

    # -- reductions and views --------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out._parents:
            shape = self.shape
            def bw(g):
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self.accumulate_grad(np.broadcast_to(g, shape).copy())
            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _node(self.data.reshape(shape), (self,))
        if out._parents:
            orig = self.shape
            out._backward = lambda g: self.accumulate_grad(g.reshape(orig))
        return out

    def flatten(self):
        """Collapse all non-batch axes: [B, ...] -> [B, D]."""
        return self.reshape(self.shape[0], -1)

    def __getitem__(self, key):
        out = _node(self.data[key], (self,))
        if out._parents:
            shape = self.shape
            def bw(g):
                full = np.zeros(shape)
                np.add.at(full, key, g)
                self.accumulate_grad(full)
            out._backward = bw
        return out

    # -- pointwise nonlinearities ----------------------------------------

    def exp(self):
        out = _node(np.exp(self.data), (self,))
        if out._parents:
            y = out.data
            out._backward = lambda g: self.accumulate_grad(g * y)
        return out

    def log(self):
        out = _node(np.log(self.data), (self,))
        if out._parents:
            x = self.data
            out._backward = lambda g: self.accumulate_grad(g / x)
        return out

    def log1p(self):
        out = _node(np.log1p(self.data), (self,))
        if out._parents:
            x = self.data
            out._backward = lambda g: self.accumulate_grad(g / (1.0 + x))
        return out

    def sqrt(self):
        out = _node(np.sqrt(self.data), (self,))
        if out._parents:
            y = out.data
            out._backward = lambda g: self.accumulate_grad(g * 0.5 / y)
        return out

    def relu(self):
        out = _node(np.maximum(self.data, 0.0), (self,))
        if out._parents:
            mask = self.data > 0
            out._backward = lambda g: self.accumulate_grad(g * mask)
        return out

    def sigmoid(self):
        out = _node(1.0 / (1.0 + np.exp(-self.data)), (self,))
        if out._parents:
            y = out.data
            out._backward = lambda g: self.accumulate_grad(g * y * (1.0 - y))
        return out


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data: np.ndarray, parents: Sequence[Tensor]) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
    return out


# -- structured ops ------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight + bias for x:[B,I], weight:[I,O], bias:[O]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear needs [B,I]@[I,O], got x{x.shape} W{weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear bias shape {bias.shape} does not match output extent ({weight.shape[1]},)")
    return x @ weight + bias


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tensors)
    if out._parents:
        extents = [t.shape[axis] for t in tensors]
        splits = np.cumsum(extents)[:-1]
        def bw(g):
            for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
                if t.requires_grad:
                    t.accumulate_grad(piece)
        out._backward = bw
    return out


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _node(np.stack([t.data for t in tensors], axis=axis), tensors)
    if out._parents:
        def bw(g):
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t.accumulate_grad(np.take(g, i, axis=axis))
        out._backward = bw
    return out


def softmax_with_temperature(v: Tensor, tau: float, axis: int = -1) -> Tensor:
    """Stable softmax of v/tau along ``axis``; columns sum to one."""
    if tau <= 0:
        raise ParameterError(f"softmax temperature must be positive, got {tau}")
    if not np.all(np.isfinite(v.data)):
        raise ParameterError("softmax input must be finite")
    scaled = v.data / tau
    scaled = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(scaled)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _node(s, (v,))
    if out._parents:
        def bw(g):
            inner = (g * s).sum(axis=axis, keepdims=True)
            v.accumulate_grad((g - inner) * s / tau)
        out._backward = bw
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = _node(ls, (x,))
    if out._parents:
        sm = np.exp(ls)
        def bw(g):
            x.accumulate_grad(g - sm * g.sum(axis=axis, keepdims=True))
        out._backward = bw
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels).astype(np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy needs logits [B,K] and labels [B], got {logits.shape} and {labels.shape}")
    batch = logits.shape[0]
    ls = log_softmax(logits, axis=1)
    picked = ls[np.arange(batch), labels]
    return -picked.mean()


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Cross-correlation of x:[B,C,H,W] with kernel:[F,C,kh,kw], stride 1."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, in_ch, h, w = x.shape
    out_ch, k_ch, kh, kw = kernel.shape
    if in_ch != k_ch:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape}, kernel {kernel.shape}, padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # im2col: [B, C*kh*kw, ho*wo] against kernel [F, C*kh*kw]
    cols = np.empty((batch, in_ch, kh * kw, ho, wo))
    for di in range(kh):
        for dj in range(kw):
            cols[:, :, di * kw + dj] = xp[:, :, di:di + ho, dj:dj + wo]
    cols = cols.reshape(batch, in_ch * kh * kw, ho * wo)
    kmat = kernel.data.reshape(out_ch, in_ch * kh * kw)
    y = np.matmul(kmat, cols).reshape(batch, out_ch, ho, wo)
    if bias is not None:
        if bias.shape != (out_ch,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match filters ({out_ch},)")
        y = y + bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _node(y, parents)
    if out._parents:
        def bw(g):
            gl = g.reshape(batch, out_ch, ho * wo)
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            if kernel.requires_grad:
                gk = np.matmul(gl, cols.transpose(0, 2, 1)).sum(axis=0)
                kernel.accumulate_grad(gk.reshape(kernel.shape))
            if x.requires_grad:
                gcols = np.matmul(kmat.T, gl).reshape(batch, in_ch, kh * kw, ho, wo)
                gxp = np.zeros_like(xp)
                for di in range(kh):
                    for dj in range(kw):
                        gxp[:, :, di:di + ho, dj:dj + wo] += gcols[:, :, di * kw + dj]
                if padding:
                    gxp = gxp[:, :, padding:-padding, padding:-padding]
                x.accumulate_grad(gxp)
        out._backward = bw
    return out


def conv_transpose2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Transposed convolution with kernel extent equal to stride.

    x:[B,C,H,W], kernel:[C,F,s,s] -> [B,F,H*s,W*s]. With kernel == stride
    the output patches are disjoint, which is the only case the decoder
    architecture needs.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv_transpose2d needs 4-d input and kernel, got {x.shape} and {kernel.shape}")
    batch, in_ch, h, w = x.shape
    k_in, out_ch, kh, kw = kernel.shape
    if in_ch != k_in:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if kh != stride or kw != stride:
        raise ShapeError(f"conv_transpose2d implements kernel == stride only, got kernel {kernel.shape} stride {stride}")
    y = np.zeros((batch, out_ch, h * stride, w * stride))
    x_flat = x.data.reshape(batch, in_ch, h * w)
    for di in range(stride):
        for dj in range(stride):
            piece = np.matmul(kernel.data[:, :, di, dj].T, x_flat)
            y[:, :, di::stride, dj::stride] = piece.reshape(batch, out_ch, h, w)
    if bias is not None:
        if bias.shape != (out_ch,):
            raise ShapeError(f"conv_transpose2d bias shape {bias.shape} does not match filters ({out_ch},)")
        y = y + bias.data[None, :, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    out = _node(y, parents)
    if out._parents:
        x_data, k_data = x.data, kernel.data
        def bw(g):
            if bias is not None and bias.requires_grad:
                bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
            xf = x_data.reshape(batch, in_ch, h * w)
            if x.requires_grad:
                gx = np.zeros((batch, in_ch, h * w))
                for di in range(stride):
                    for dj in range(stride):
                        gf = np.ascontiguousarray(g[:, :, di::stride, dj::stride]).reshape(batch, out_ch, h * w)
                        gx += np.matmul(k_data[:, :, di, dj], gf)
                x.accumulate_grad(gx.reshape(x_data.shape))
            if kernel.requires_grad:
                gk = np.zeros_like(k_data)
                for di in range(stride):
                    for dj in range(stride):
                        gf = np.ascontiguousarray(g[:, :, di::stride, dj::stride]).reshape(batch, out_ch, h * w)
                        gk[:, :, di, dj] = np.matmul(xf, gf.transpose(0, 2, 1)).sum(axis=0)
                kernel.accumulate_grad(gk)
        out._backward = bw
    return out


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2, truncating odd trailing rows/columns.

    Gradient routes to the first maximal element of each window.
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 needs [B,C,H,W], got {x.shape}")
    batch, ch, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeError(f"maxpool2 input too small: {x.shape}")
    cropped = x.data[:, :, :ho * 2, :wo * 2]
    windows = cropped.reshape(batch, ch, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, ho, wo, 4)
    idx = windows.argmax(axis=-1)  # argmax returns the first maximum: deterministic ties
    out = _node(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0], (x,))
    if out._parents:
        def bw(g):
            gw = np.zeros((batch, ch, ho, wo, 4))
            np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
            gx = np.zeros((batch, ch, h, w))
            gx[:, :, :ho * 2, :wo * 2] = gw.reshape(batch, ch, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(batch, ch, ho * 2, wo * 2)
            x.accumulate_grad(gx)
        out._backward = bw
    return out


@dataclass
class BatchNormState:
    """Scale/shift parameters plus running statistics for one batch norm.

    ``frozen`` pins the running statistics permanently: a frozen norm
    behaves like eval mode even during training and is never mutated.
    """

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    frozen: bool = False

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels), requires_grad=True),
            beta=Tensor(np.zeros(channels), requires_grad=True),
            running_mean=np.zeros(channels),
            running_var=np.ones(channels),
            momentum=momentum,
            eps=eps,
        )


def batchnorm(x: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize per channel (axis 1) of a 2-d or 4-d tensor.

    Training and not frozen: batch statistics are used and the running
    estimates updated in place. Otherwise the running statistics are used
    and never touched.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batchnorm expects [B,C] or [B,C,H,W], got {x.shape}")
    channels = x.shape[1]
    if state.gamma.shape != (channels,):
        raise ShapeError(f"batchnorm state extent {state.gamma.shape} does not match input channels ({channels},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, channels) if x.ndim == 2 else (1, channels, 1, 1)
    gamma, beta = state.gamma, state.beta

    if training and not state.frozen:
        if x.shape[0] == 0:
            raise DegenerateBatchError("batchnorm got an empty batch in training mode")
        n = x.data.size // channels
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, used for normalization
        state.running_mean += state.momentum * (mean - state.running_mean)
        unbiased = var * n / max(n - 1, 1)
        state.running_var += state.momentum * (unbiased - state.running_var)
        inv_std = 1.0 / np.sqrt(var + state.eps)
        xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
        out = _node(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape), (x, gamma, beta))
        if out._parents:
            def bw(g):
                if gamma.requires_grad:
                    gamma.accumulate_grad((g * xhat).sum(axis=axes))
                if beta.requires_grad:
                    beta.accumulate_grad(g.sum(axis=axes))
                if x.requires_grad:
                    gs = g * gamma.data.reshape(bshape)
                    m1 = gs.mean(axis=axes).reshape(bshape)
                    m2 = (gs * xhat).mean(axis=axes).reshape(bshape)
                    x.accumulate_grad((gs - m1 - xhat * m2) * inv_std.reshape(bshape))
            out._backward = bw
        return out

    inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
    xhat = (x.data - state.running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = _node(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape), (x, gamma, beta))
    if out._parents:
        def bw(g):
            if gamma.requires_grad:
                gamma.accumulate_grad((g * xhat).sum(axis=axes))
            if beta.requires_grad:
                beta.accumulate_grad(g.sum(axis=axes))
            if x.requires_grad:
                x.accumulate_grad(g * (gamma.data * inv_std).reshape(bshape))
        out._backward = bw
    return out


# -- initializers ---------------------------------------------------------


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def xavier_normal(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=shape), requires_grad=True)


def zeros(shape: tuple, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# -- gradient checking -----------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing autodiff against central finite differences."""

    max_rel_err: float
    tol: float
    checked: int
    failure: Optional[str] = None
    worst: Optional[tuple] = None  # (input index, flat element index, analytic, numeric)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_err <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    rng: Optional[np.random.Generator] = None,
    max_elements: Optional[int] = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f`` with central differences.

    ``max_elements`` caps the probed coordinates per input (random subset)
    so large parameter tensors stay cheap to check.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if out.shape != ():
        raise ContractError(f"grad_check needs a scalar-valued function, got output shape {out.shape}")
    if not np.isfinite(out.data):
        return GradCheckReport(np.inf, tol, 0, failure=f"non-finite forward value {out.data!r}")
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = rng or np.random.default_rng(0)
    max_rel, worst, checked = 0.0, None, 0
    for i, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat_idx = np.arange(t.size)
        if max_elements is not None and t.size > max_elements:
            flat_idx = rng.choice(t.size, size=max_elements, replace=False)
        flat = t.data.reshape(-1)
        for j in flat_idx:
            orig = flat[j]
            flat[j] = orig + h
            with no_grad():
                up = f(*inputs).item()
            flat[j] = orig - h
            with no_grad():
                down = f(*inputs).item()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                return GradCheckReport(np.inf, tol, checked, failure=f"non-finite probe at input {i} element {j}")
            numeric = (up - down) / (2 * h)
            a = analytic[i].reshape(-1)[j]
            # unit floor on the denominator: deviations on (near-)zero
            # gradients read as absolute, keeping probe noise below tol
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            checked += 1
            if rel > max_rel:
                max_rel, worst = rel, (i, int(j), float(a), float(numeric))
    return GradCheckReport(max_rel, tol, checked, worst=worst)
