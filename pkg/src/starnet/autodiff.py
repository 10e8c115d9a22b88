"""Minimal reverse-mode autodiff over dense float tensors.

Only the operator set the network actually needs: 2-D convolution and its
transpose, ReLU/PReLU, channel concatenation, elementwise arithmetic and
reductions.  Data lives in numpy arrays (NCHW for activations); gradients
accumulate with += across reuse, so callers must zero_grad between steps.
"""

from __future__ import annotations

import numpy as np

# When True every forward op asserts its output is finite.  Enabled by the
# test suite; off by default because the check is O(n) per op.
CHECK_FINITE = False

DEFAULT_DTYPE = np.float32


class ContractViolation(ValueError):
    """Raised when an operation's shape/usage contract is broken."""


def _check(out: np.ndarray) -> None:
    if CHECK_FINITE and not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite value produced by forward op")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self) -> None:
        """Reverse-accumulate gradients from a scalar loss.

        Gradients accumulate across calls; call zero_grad on parameters
        between optimization steps.
        """
        if self.data.size != 1:
            raise ContractViolation("backward requires a scalar tensor")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, self.dtype)
        if other.data.shape != self.data.shape and other.data.size != 1:
            raise ContractViolation(
                f"add shape mismatch: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data + other.data)
        _check(out.data)
        out.requires_grad = self.requires_grad or other.requires_grad
        out._parents = (self, other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g)
            if other.requires_grad:
                other._accumulate(g if other.data.shape == g.shape
                                  else g.sum().reshape(other.data.shape))
        out._backward = bwd
        return out

    def __sub__(self, other):
        return self + (_as_tensor(other, self.dtype) * -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            out = Tensor(self.data * other)
            out.requires_grad = self.requires_grad
            out._parents = (self,)

            def bwd(g):
                if self.requires_grad:
                    self._accumulate(g * other)
            out._backward = bwd
            return out
        if other.data.shape != self.data.shape:
            raise ContractViolation(
                f"mul shape mismatch: {self.data.shape} vs {other.data.shape}")
        out = Tensor(self.data * other.data)
        _check(out.data)
        out.requires_grad = self.requires_grad or other.requires_grad
        out._parents = (self, other)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * other.data)
            if other.requires_grad:
                other._accumulate(g * self.data)
        out._backward = bwd
        return out

    __rmul__ = __mul__

    def sum(self):
        out = Tensor(self.data.sum().reshape(()))
        out.requires_grad = self.requires_grad
        out._parents = (self,)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(np.broadcast_to(g, self.data.shape).astype(self.dtype))
        out._backward = bwd
        return out

    def mean(self):
        return self.sum() * (1.0 / self.data.size)

    def abs(self):
        out = Tensor(np.abs(self.data))
        out.requires_grad = self.requires_grad
        out._parents = (self,)

        def bwd(g):
            if self.requires_grad:
                self._accumulate(g * np.sign(self.data))
        out._backward = bwd
        return out


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


class Parameter(Tensor):
    """A named trainable tensor."""

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


# -- activations ------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    out.requires_grad = x.requires_grad
    out._parents = (x,)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))
    out._backward = bwd
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x > 0, slope * x otherwise; slope is a learned scalar."""
    s = float(slope.data)
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, s * x.data))
    _check(out.data)
    out.requires_grad = x.requires_grad or slope.requires_grad
    out._parents = (x, slope)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * np.where(pos, 1.0, s).astype(x.dtype))
        if slope.requires_grad:
            slope._accumulate(np.sum(g * np.where(pos, 0.0, x.data))
                              .reshape(slope.data.shape).astype(slope.dtype))
    out._backward = bwd
    return out


def concat_channels(inputs) -> Tensor:
    inputs = list(inputs)
    n, _, h, w = inputs[0].data.shape
    for t in inputs[1:]:
        if t.data.shape[0] != n or t.data.shape[2:] != (h, w):
            raise ContractViolation("concat_channels: spatial/batch mismatch")
    out = Tensor(np.concatenate([t.data for t in inputs], axis=1))
    out.requires_grad = any(t.requires_grad for t in inputs)
    out._parents = tuple(inputs)

    def bwd(g):
        c0 = 0
        for t in inputs:
            c1 = c0 + t.data.shape[1]
            if t.requires_grad:
                t._accumulate(g[:, c0:c1])
            c0 = c1
    out._backward = bwd
    return out


# -- convolution primitives (plain numpy, shared by forward and backward) ---

def _windows(x, kh, kw, stride, pad):
    """Strided sliding windows of a padded NCHW array: (N,C,Ho,Wo,kh,kw)."""
    from numpy.lib.stride_tricks import sliding_window_view
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _corr(x, w, stride, pad):
    """Cross-correlation: x (N,C,H,W) with w (O,C,kh,kw) -> (N,O,Ho,Wo)."""
    n, c, h, wd = x.shape
    o, c2, kh, kw = w.shape
    if c != c2:
        raise ContractViolation(f"conv channel mismatch: input {c} vs weight {c2}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation("conv output would be empty")
    if n * c * ho * wo * kh * kw <= 1 << 25:
        win = _windows(x, kh, kw, stride, pad)
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    # large-window fallback: one vectorized accumulation per kernel tap
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            out += np.einsum("nchw,oc->nohw", xs, w[:, :, i, j], optimize=True)
    return out


def _corr_input_grad(gy, w, stride, pad, h, wd):
    """Adjoint of _corr w.r.t. its input (also conv_transpose forward)."""
    n, o, ho, wo = gy.shape
    o2, c, kh, kw = w.shape
    if o != o2:
        raise ContractViolation(f"conv channel mismatch: {o} vs {o2}")
    xg = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    gyt = np.ascontiguousarray(gy.transpose(0, 2, 3, 1))   # N,Ho,Wo,O
    for i in range(kh):
        for j in range(kw):
            contrib = gyt @ w[:, :, i, j]                   # N,Ho,Wo,C
            xg[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                contrib.transpose(0, 3, 1, 2)
    return xg[:, :, pad:pad + h, pad:pad + wd]


def _corr_weight_grad(x, gy, stride, pad, kh, kw):
    """Gradient of _corr w.r.t. its weight."""
    n, c, h, wd = x.shape
    ho, wo = gy.shape[2], gy.shape[3]
    if n * c * ho * wo * kh * kw <= 1 << 25:
        win = _windows(x, kh, kw, stride, pad)[:, :, :ho, :wo]
        return np.ascontiguousarray(
            np.tensordot(gy, win, axes=([0, 2, 3], [0, 2, 3])))
    o = gy.shape[1]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.zeros((o, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gy, xs, optimize=True)
    return gw


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    y = _corr(x.data, w.data, stride, padding)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)
    _check(out.data)
    parents = (x, w) if b is None else (x, w, b)
    out.requires_grad = any(t.requires_grad for t in parents)
    out._parents = parents

    def bwd(g):
        if x.requires_grad:
            x._accumulate(_corr_input_grad(g, w.data, stride, padding,
                                           x.data.shape[2], x.data.shape[3]))
        if w.requires_grad:
            w._accumulate(_corr_weight_grad(x.data, g, stride, padding,
                                            w.data.shape[2], w.data.shape[3]))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
    out._backward = bwd
    return out


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor,
                     stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; w has shape (Cin, Cout, kh, kw)."""
    n, cin, h, wd = x.data.shape
    cin2, cout, kh, kw = w.data.shape
    if cin != cin2:
        raise ContractViolation(f"conv_transpose channel mismatch: {cin} vs {cin2}")
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (wd - 1) * stride - 2 * padding + kw
    y = _corr_input_grad(x.data, w.data, stride, padding, ho, wo)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)
    _check(out.data)
    parents = (x, w) if b is None else (x, w, b)
    out.requires_grad = any(t.requires_grad for t in parents)
    out._parents = parents

    def bwd(g):
        if x.requires_grad:
            x._accumulate(_corr(g, w.data, stride, padding))
        if w.requires_grad:
            w._accumulate(_corr_weight_grad(g, x.data, stride, padding, kh, kw))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
    out._backward = bwd
    return out


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflective padding on the bottom/right edges only."""
    if pad_h == 0 and pad_w == 0:
        return x
    out = Tensor(np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)),
                        mode="reflect"))
    out.requires_grad = x.requires_grad
    out._parents = (x,)
    h, w = x.data.shape[2], x.data.shape[3]

    def bwd(g):
        if not x.requires_grad:
            return
        gx = g[:, :, :h, :w].copy()
        # fold reflected contributions back onto their sources
        if pad_h:
            gx[:, :, h - pad_h - 1:h - 1, :] += np.flip(g[:, :, h:, :w], axis=2)
        if pad_w:
            gx[:, :, :, w - pad_w - 1:w - 1] += np.flip(g[:, :, :h, w:], axis=3)
        if pad_h and pad_w:
            gx[:, :, h - pad_h - 1:h - 1, w - pad_w - 1:w - 1] += \
                np.flip(g[:, :, h:, w:], axis=(2, 3))
        x._accumulate(gx)
    out._backward = bwd
    return out


def crop(x: Tensor, h: int, w: int) -> Tensor:
    """Crop to the top-left h x w window."""
    out = Tensor(x.data[:, :, :h, :w])
    out.requires_grad = x.requires_grad
    out._parents = (x,)

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, :, :h, :w] = g
            x._accumulate(gx)
    out._backward = bwd
    return out
