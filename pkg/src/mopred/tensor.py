"""Dense float64 tensors with tape-based reverse-mode differentiation.

The tape is dynamic (define-by-run): operations executed while a
``GradientTape`` is active append one node each, in execution order.  That
order is already topological, so the backward pass is a single reverse walk
over the node list.  Tapes are rebuilt every optimization step.

Everything is 64-bit: finite-difference gradient checks at h=1e-5 need the
headroom, and the models built on top of this are small enough that speed
is dominated by Python call overhead, not arithmetic width.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import (
    ConfigurationError,
    DegenerateMaskError,
    DimensionError,
    EmptyPoolError,
    EmptySequenceError,
    NonFiniteError,
)

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def active_tape():
    """The innermost active tape on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class GradientTape:
    """Append-only record of differentiable operations.

    Usage::

        with GradientTape() as tape:
            loss = forward(...)
        tape.backward(loss)

    ``backward`` may be called once; afterwards the tape is consumed.
    Each thread has its own tape stack, so independent forwards on
    separate threads never interleave records.
    """

    def __init__(self):
        self._nodes: list = []
        self._consumed = False

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: "Tensor", inputs: tuple, backward: Callable):
        self._nodes.append((out, inputs, backward))

    def backward(self, loss: "Tensor", seed=None):
        """Accumulate gradients of ``loss`` into every reachable tensor."""
        if self._consumed:
            raise RuntimeError("tape already consumed; build a fresh tape per step")
        self._consumed = True
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(
                    f"backward without explicit seed needs a scalar loss, got shape {loss.shape}"
                )
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=np.float64).reshape(loss.data.shape)
        for out, inputs, backward in reversed(self._nodes):
            gout = out.grad
            if gout is None:
                continue
            grads = backward(gout)
            for tin, gin in zip(inputs, grads):
                if gin is None or not tin.requires_grad:
                    continue
                if gin.shape != tin.data.shape:
                    gin = gin.reshape(tin.data.shape)
                if tin.grad is None:
                    tin.grad = np.array(gin, dtype=np.float64)
                else:
                    tin.grad = tin.grad + gin


class Tensor:
    """A dense float64 array, optionally participating in differentiation."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor creation rejected non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @staticmethod
    def _wrap(arr: np.ndarray) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = np.asarray(arr, dtype=np.float64)
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def check_finite(self) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError("tensor holds non-finite values")
        return self

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A non-differentiable tensor (inputs, masks-as-floats, targets)."""
    t = as_tensor(x)
    t.requires_grad = False
    return t


def _record(out: Tensor, inputs: tuple, backward: Callable) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data + b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data - b.data)

    def backward(g):
        return (
            _unbroadcast(g, a.data.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data * b.data)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.data.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor._wrap(a.data / b.data)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.data.shape) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * out.data / b.data, b.data.shape)
            if b.requires_grad
            else None
        )
        return ga, gb

    return _record(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(-a.data)
    return _record(out, (a,), lambda g: (-g if a.requires_grad else None,))


def _unary(a, fn, dfn) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(fn(a.data))

    def backward(g):
        return (g * dfn(a.data, out.data) if a.requires_grad else None,)

    return _record(out, (a,), backward)


def exp(a) -> Tensor:
    return _unary(a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def sqrt(a) -> Tensor:
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def tanh(a) -> Tensor:
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(a) -> Tensor:
    return _unary(a, _sigmoid_np, lambda x, y: y * (1.0 - y))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # clipping keeps exp in range; sigmoid is fully saturated beyond +-60
    return 1.0 / (1.0 + np.exp(-np.clip(x, -60.0, 60.0)))


def relu(a) -> Tensor:
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softplus(a) -> Tensor:
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: _sigmoid_np(x))


def sin(a) -> Tensor:
    return _unary(a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary(a, np.cos, lambda x, y: -np.sin(x))


def absolute(a) -> Tensor:
    return _unary(a, np.abs, lambda x, y: np.sign(x))


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(a.data.reshape(shape))

    def backward(g):
        return (g.reshape(a.data.shape) if a.requires_grad else None,)

    return _record(out, (a,), backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor._wrap(a.data.transpose(axes))

    def backward(g):
        return (g.transpose(inv) if a.requires_grad else None,)

    return _record(out, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = Tensor._wrap(np.concatenate([t.data for t in ts], axis=axis))
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        pieces = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                pieces.append(g[tuple(idx)])
            else:
                pieces.append(None)
        return tuple(pieces)

    return _record(out, tuple(ts), backward)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(a.data[key])
    advanced = _is_advanced_key(key)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return _record(out, (a,), backward)


def _is_advanced_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = Tensor._wrap(a.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        if not a.requires_grad:
            return (None,)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _record(out, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_pool(a, axis: int = 0, mask: np.ndarray | None = None) -> Tensor:
    """Maximum over one axis, gradient routed to the (first) argmax.

    ``mask`` marks which entries may win the pool; it is broadcast against
    the input after appending a trailing feature axis when one dimension
    short.  Rows with no valid entry raise ``EmptyPoolError``.
    """
    a = as_tensor(a)
    data = a.data
    if data.shape[axis] == 0:
        raise EmptyPoolError(f"cannot pool over empty axis {axis} of shape {data.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.ndim == data.ndim - 1:
            m = m[..., None]
        m = np.broadcast_to(m, data.shape)
        if not m.any(axis=axis).all():
            raise EmptyPoolError("pooling over fully-masked entries")
        work = np.where(m, data, -np.inf)
    else:
        work = data
    idx = np.argmax(work, axis=axis)
    idx_exp = np.expand_dims(idx, axis)
    out = Tensor._wrap(np.take_along_axis(data, idx_exp, axis=axis).squeeze(axis=axis))

    def backward(g):
        if not a.requires_grad:
            return (None,)
        full = np.zeros_like(data)
        np.put_along_axis(full, idx_exp, np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _record(out, (a,), backward)


# ---------------------------------------------------------------------------
# matrix product


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(
            f"matmul needs >=2-D operands, got shapes {a.shape} and {b.shape}"
        )
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor._wrap(a.data @ b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        if b.requires_grad:
            gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _record(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map along the last axis: ``x @ weight + bias``."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.shape[-1] != weight.data.shape[0]:
        raise DimensionError(
            f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}"
        )
    squeeze = x.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    if squeeze:
        out = reshape(out, (weight.data.shape[1],))
    return out


# ---------------------------------------------------------------------------
# softmax family


def masked_softmax(a, mask: np.ndarray | None, axis: int = -1) -> Tensor:
    """Softmax over the unmasked entries of one axis.

    Masked positions get probability exactly 0.  A row whose mask admits no
    key raises ``DegenerateMaskError``.
    """
    a = as_tensor(a)
    x = a.data
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not m.any(axis=axis).all():
            raise DegenerateMaskError("softmax row with every entry masked")
        neg = np.where(m, x, -np.inf)
        shifted = neg - neg.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    denom = e.sum(axis=axis, keepdims=True)
    y = e / denom
    out = Tensor._wrap(y)

    def backward(g):
        if not a.requires_grad:
            return (None,)
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _record(out, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    return masked_softmax(a, None, axis=axis)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor._wrap(xhat * gamma.data + beta.data)

    def backward(g):
        gx = ggamma = gbeta = None
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, x.data.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, x.data.shape[-1]).sum(axis=0)
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            gx = inv * (dxhat - m1 - xhat * m2)
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------------------
# temporal ops


def conv1d(x, weight, bias=None) -> Tensor:
    """Same-length 1-D cross-correlation along the time axis.

    ``x`` is (T, C_in) or (N, T, C_in); ``weight`` is (k, C_in, C_out) with
    odd k; the input is zero-padded symmetrically so the output keeps T.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 3:
        raise DimensionError(f"conv1d weight must be (k, C_in, C_out), got {weight.shape}")
    k, cin, cout = weight.data.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d kernel size must be odd, got {k}")
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 3:
        raise DimensionError(f"conv1d input must be (T, C) or (N, T, C), got {x.shape}")
    n, t, c = xb.shape
    if c != cin:
        raise DimensionError(
            f"conv1d channel mismatch: input shape {x.shape} vs weight shape {weight.shape}"
        )
    pad = k // 2
    xp = np.zeros((n, t + 2 * pad, c))
    xp[:, pad : pad + t] = xb
    cols = np.concatenate([xp[:, j : j + t, :] for j in range(k)], axis=2)
    w2 = weight.data.reshape(k * cin, cout)
    y = cols @ w2
    if bias is not None:
        y = y + as_tensor(bias).data
    out = Tensor._wrap(y[0] if squeeze else y)
    btensor = as_tensor(bias) if bias is not None else None

    def backward(g):
        gb3 = g[None] if squeeze else g
        gx = gw = gbias = None
        if weight.requires_grad:
            gw = np.einsum("nti,nto->io", cols, gb3).reshape(k, cin, cout)
        if x.requires_grad:
            gcols = gb3 @ w2.T
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t, :] += gcols[:, :, j * cin : (j + 1) * cin]
            gx = gxp[:, pad : pad + t, :]
            if squeeze:
                gx = gx[0]
        if btensor is not None and btensor.requires_grad:
            gbias = gb3.sum(axis=(0, 1))
        grads = (gx, gw) if btensor is None else (gx, gw, gbias)
        return grads

    inputs = (x, weight) if btensor is None else (x, weight, btensor)
    return _record(out, inputs, backward)


def lstm_forward(x, layers: Sequence[tuple]) -> tuple[Tensor, Tensor]:
    """Stacked LSTM over a sequence, zero-initialized states.

    ``x`` is (T, C) or (N, T, C).  ``layers`` holds (w_x, w_h, b) triples,
    with w_x of shape (C_in, 4H), w_h of shape (H, 4H) and gate order
    i, f, g, o.  Returns the full top-layer output sequence and its final
    row.  Implemented as a single fused tape node with a hand-written
    backward-through-time pass; the per-op tape would otherwise dominate
    runtime for these small models.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    xb = x.data[None] if squeeze else x.data
    if xb.ndim != 3:
        raise DimensionError(f"lstm input must be (T, C) or (N, T, C), got {x.shape}")
    n, t, _ = xb.shape
    if t == 0:
        raise EmptySequenceError("lstm_forward over an empty sequence")
    params: list[Tensor] = []
    for wx, wh, b in layers:
        params.extend((as_tensor(wx), as_tensor(wh), as_tensor(b)))

    caches = []
    inp = xb
    for li in range(len(layers)):
        wx, wh, b = (params[3 * li + j].data for j in range(3))
        h_dim = wh.shape[0]
        h = np.zeros((n, h_dim))
        c = np.zeros((n, h_dim))
        gates_i, gates_f, gates_g, gates_o = [], [], [], []
        cs_prev, tanh_cs, hs_prev, hs = [], [], [], []
        for ti in range(t):
            hs_prev.append(h)
            cs_prev.append(c)
            z = inp[:, ti] @ wx + h @ wh + b
            zi, zf, zg, zo = np.split(z, 4, axis=1)
            ig = _sigmoid_np(zi)
            fg = _sigmoid_np(zf)
            gg = np.tanh(zg)
            og = _sigmoid_np(zo)
            c = fg * c + ig * gg
            tc = np.tanh(c)
            h = og * tc
            gates_i.append(ig)
            gates_f.append(fg)
            gates_g.append(gg)
            gates_o.append(og)
            tanh_cs.append(tc)
            hs.append(h)
        layer_out = np.stack(hs, axis=1)
        caches.append((inp, gates_i, gates_f, gates_g, gates_o, cs_prev, tanh_cs, hs_prev))
        inp = layer_out
    y = inp

    out = Tensor._wrap(y[0] if squeeze else y)

    def backward(g):
        gy = g[None] if squeeze else g
        grads_w = [np.zeros_like(p.data) for p in params]
        gseq = gy
        for li in reversed(range(len(layers))):
            wx, wh, b = (params[3 * li + j].data for j in range(3))
            inp_l, gi, gf, gg_, go, cs_prev, tanh_cs, hs_prev = caches[li]
            dnext_h = np.zeros((n, wh.shape[0]))
            dnext_c = np.zeros((n, wh.shape[0]))
            dinp = np.zeros_like(inp_l)
            for ti in reversed(range(t)):
                dh = gseq[:, ti] + dnext_h
                do = dh * tanh_cs[ti]
                dc = dnext_c + dh * go[ti] * (1.0 - tanh_cs[ti] ** 2)
                df = dc * cs_prev[ti]
                di = dc * gg_[ti]
                dg = dc * gi[ti]
                dnext_c = dc * gf[ti]
                dz = np.concatenate(
                    [
                        di * gi[ti] * (1.0 - gi[ti]),
                        df * gf[ti] * (1.0 - gf[ti]),
                        dg * (1.0 - gg_[ti] ** 2),
                        do * go[ti] * (1.0 - go[ti]),
                    ],
                    axis=1,
                )
                grads_w[3 * li + 0] += inp_l[:, ti].T @ dz
                grads_w[3 * li + 1] += hs_prev[ti].T @ dz
                grads_w[3 * li + 2] += dz.sum(axis=0)
                dinp[:, ti] = dz @ wx.T
                dnext_h = dz @ wh.T
            gseq = dinp
        gx = gseq[0] if squeeze else gseq
        results = [gx if x.requires_grad else None]
        for p, gp in zip(params, grads_w):
            results.append(gp if p.requires_grad else None)
        return tuple(results)

    outputs = _record(out, tuple([x] + params), backward)
    last = getitem(outputs, (t - 1,) if squeeze else (slice(None), t - 1))
    return outputs, last


# ---------------------------------------------------------------------------
# attention


def scaled_dot_attention(
    q,
    k,
    v,
    mask: np.ndarray | None = None,
    heads: int = 1,
    out_weight=None,
    out_bias=None,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention over already-projected q/k/v.

    ``mask`` is boolean (Nq, Nk); masked logits are excluded from the
    softmax entirely, so attention weights per query sum to 1 over the
    unmasked keys.  When ``out_weight`` is given the concatenated heads are
    passed through a final affine projection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DimensionError(
            f"attention expects 2-D q/k/v, got {q.shape}, {k.shape}, {v.shape}"
        )
    nq, d = q.data.shape
    nk = k.data.shape[0]
    if d % heads != 0:
        raise ConfigurationError(f"model width {d} not divisible by heads {heads}")
    if k.data.shape[1] != d or v.data.shape[1] != d or v.data.shape[0] != nk:
        raise DimensionError(
            f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    dh = d // heads
    qh = transpose(reshape(q, (nq, heads, dh)), (1, 0, 2))
    kh = transpose(reshape(k, (nk, heads, dh)), (1, 0, 2))
    vh = transpose(reshape(v, (nk, heads, dh)), (1, 0, 2))
    logits = mul(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = masked_softmax(logits, None if mask is None else np.asarray(mask, bool)[None], axis=-1)
    ctx = matmul(attn, vh)
    merged = reshape(transpose(ctx, (1, 0, 2)), (nq, d))
    out = merged if out_weight is None else linear(merged, out_weight, out_bias)
    if return_weights:
        return out, attn.data.copy()
    return out


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred, target, mask: np.ndarray | None = None) -> Tensor:
    """Mean absolute error, optionally restricted to masked-in entries.

    ``mask`` is broadcast against ``pred`` after appending a trailing axis
    when one dimension short (so a per-timestep mask covers all channels).
    """
    pred = as_tensor(pred)
    tgt = np.asarray(target, dtype=np.float64)
    if pred.data.shape != tgt.shape:
        raise DimensionError(f"l1_loss shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = absolute(sub(pred, constant(tgt)))
    if mask is None:
        return mean(diff)
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim == pred.ndim - 1:
        m = m[..., None]
    m = np.broadcast_to(m, pred.data.shape)
    count = float(m.sum())
    if count == 0:
        raise EmptyPoolError("l1_loss mask selects no elements")
    return mul(tensor_sum(mul(diff, constant(m))), 1.0 / count)


def cross_entropy(logits, target) -> Tensor:
    """Softmax cross-entropy against integer class indices (mean over rows)."""
    logits = as_tensor(logits)
    x = logits.data
    squeeze = x.ndim == 1
    xb = x[None] if squeeze else x
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n, kk = xb.shape
    if tgt.shape != (n,):
        raise DimensionError(f"cross_entropy targets {tgt.shape} do not match logits {logits.shape}")
    if tgt.min() < 0 or tgt.max() >= kk:
        raise ConfigurationError(f"cross_entropy target out of range [0, {kk})")
    m = xb.max(axis=1, keepdims=True)
    lse = np.log(np.exp(xb - m).sum(axis=1)) + m[:, 0]
    picked = xb[np.arange(n), tgt]
    out = Tensor._wrap(np.array((lse - picked).mean()))

    def backward(g):
        if not logits.requires_grad:
            return (None,)
        p = np.exp(xb - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), tgt] -= 1.0
        gx = (float(g) / n) * p
        return (gx[0] if squeeze else gx,)

    return _record(out, (logits,), backward)


def gmm_nll(params, target) -> Tensor:
    """Negative log-likelihood of 2-D points under per-step bivariate Gaussians.

    ``params`` carries (mu_x, mu_y, sigma_x, sigma_y, rho) on the last axis;
    sigmas must already be positive and rho strictly inside (-1, 1) — the
    decoder guarantees both via softplus/tanh reparameterization.  Returns
    the per-element NLL tensor (no reduction).
    """
    params = as_tensor(params)
    tgt = np.asarray(target, dtype=np.float64)
    if params.data.shape[-1] != 5:
        raise DimensionError(f"gmm parameters need a trailing extent of 5, got {params.shape}")
    if tgt.shape != params.data.shape[:-1] + (2,):
        raise DimensionError(f"gmm target shape {tgt.shape} incompatible with params {params.shape}")
    raw = params.data
    if (raw[..., 2] <= 0).any() or (raw[..., 3] <= 0).any():
        raise ValueError("gmm_nll requires strictly positive standard deviations")
    if (np.abs(raw[..., 4]) >= 1).any():
        raise ValueError("gmm_nll requires correlation strictly inside (-1, 1)")
    mux, muy = params[..., 0], params[..., 1]
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    dx = div(sub(constant(tgt[..., 0]), mux), sx)
    dy = div(sub(constant(tgt[..., 1]), muy), sy)
    one_m_r2 = sub(1.0, mul(rho, rho))
    z = add(sub(mul(dx, dx), mul(2.0, mul(rho, mul(dx, dy)))), mul(dy, dy))
    nll = add(
        add(constant(math.log(2.0 * math.pi)), add(log(sx), log(sy))),
        add(mul(0.5, log(one_m_r2)), div(z, mul(2.0, one_m_r2))),
    )
    return nll
