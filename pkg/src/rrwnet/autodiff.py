"""Minimal reverse-mode autodiff engine over dense numpy arrays.

Provides exactly the operations the segmentation networks need: 3x3/1x1
convolutions, 2x2 max pooling, nearest-neighbor upsampling, channel
concatenation/slicing, ReLU, sigmoid, (masked) binary cross-entropy, and a
bias-corrected Adam optimizer.

Arrays are float32 by default; gradient-verification tests run everything in
float64 by constructing float64 tensors. Forward and backward passes are
single-threaded and deterministic; independent graphs may live on separate
threads since nodes share no mutable state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operands have incompatible shapes."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return arr


class Tensor:
    """A dense array plus the tape entry that produced it.

    ``requires_grad`` marks leaf tensors (parameters) whose ``grad`` buffer is
    populated by :meth:`backward`. Interior nodes propagate gradients but do
    not retain them. Repeated backward calls accumulate into ``grad`` until
    :func:`zero_grad` / manual reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward_fn=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return (f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, "
                f"requires_grad={self.requires_grad})")

    def item(self):
        return float(self.data.reshape(-1)[0])

    def detached(self):
        """A view of the same values with no tape history."""
        return Tensor(self.data)

    # -- graph bookkeeping ------------------------------------------------

    def _needs_tape(self):
        return self.requires_grad or self._backward_fn is not None

    def backward(self):
        """Populate ``grad`` on every requires_grad tensor reachable from here.

        Only defined for scalar outputs (losses). Gradients accumulate across
        calls, matching the usual deep-learning convention.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward() requires a scalar, got shape {tuple(self.shape)}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent._needs_tape():
                    stack.append((parent, False))
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.requires_grad:
                node.grad = grad if node.grad is None else node.grad + grad
            if node._backward_fn is None:
                continue
            for parent, pgrad in zip(node._parents, node._backward_fn(grad)):
                if pgrad is None or not parent._needs_tape():
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pgrad
                else:
                    pending[key] = pgrad

    # -- small arithmetic helpers (used for loss aggregation and tests) ---

    def __add__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(np.asarray(other, dtype=self.data.dtype))
        if self.shape != other.shape:
            raise ShapeError(f"add: shapes {self.shape} and {other.shape} differ")
        out_data = self.data + other.data
        return _node(out_data, (self, other),
                     lambda g: (g, g))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            if self.shape != other.shape:
                raise ShapeError(
                    f"mul: shapes {self.shape} and {other.shape} differ")
            return _node(self.data * other.data, (self, other),
                         lambda g: (g * other.data, g * self.data))
        c = float(other)
        return _node(self.data * c, (self,), lambda g: (g * c,))

    __rmul__ = __mul__


def _node(data, parents, backward_fn):
    if any(p._needs_tape() for p in parents):
        return Tensor(data, _parents=parents, _backward_fn=backward_fn)
    return Tensor(data)


def zero_grad(params):
    """Reset gradient buffers on an iterable or dict of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# Convolution


def _im2col(x, k, pad):
    c = x.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    if k == 1:
        return x.reshape(c, -1)
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    # (c, H, W, k, k) -> (c*k*k, H*W)
    return np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, -1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Same-size cross-correlation with an odd square kernel plus bias.

    ``x`` is (C_in, H, W), ``weight`` (C_out, C_in, k, k), ``bias`` (C_out,);
    stride 1 and padding k//2 keep the spatial size. Differentiable w.r.t.
    all three inputs.
    """
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects (C,H,W) input and (O,I,k,k) kernel, got "
            f"{x.shape} and {weight.shape}")
    cin, h, w = x.shape
    cout, cin_k, kh, kw = weight.shape
    if cin != cin_k:
        raise ShapeError(
            f"conv2d: input has {cin} channels but kernel expects {cin_k}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {kh}x{kw}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    pad = kh // 2
    cols = _im2col(x.data, kh, pad)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols + bias.data[:, None]
    out = out.reshape(cout, h, w)

    def backward_fn(g):
        gmat = g.reshape(cout, -1)
        gw = (gmat @ cols.T).reshape(weight.shape)
        gb = gmat.sum(axis=1)
        # dL/dx is the correlation of g with the spatially flipped kernel,
        # channels transposed; same padding keeps the size.
        wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        gcols = _im2col(g, kh, pad)
        gx = (wflip.reshape(cin, -1) @ gcols).reshape(cin, h, w)
        return gx, gw, gb

    return _node(out, (x, weight, bias), backward_fn)


# ---------------------------------------------------------------------------
# Resampling


def max_pool2(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pool; H and W must be even.

    The gradient routes to the argmax position; ties go to the first
    position in row-major scan order (numpy argmax convention).
    """
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2 requires even H and W, got {h}x{w}")
    win = x.data.reshape(c, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 2, 4)
    win = win.reshape(c, h // 2, w // 2, 4)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]

    def backward_fn(g):
        gwin = np.zeros((c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=3)
        gx = gwin.reshape(c, h // 2, w // 2, 2, 2).transpose(0, 1, 3, 2, 4)
        return (gx.reshape(c, h, w),)

    return _node(out, (x,), backward_fn)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling; gradient sums the four replicas."""
    if x.data.ndim != 3:
        raise ShapeError(f"upsample2 expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward_fn(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _node(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Channel plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack two (C,H,W) tensors along the channel axis."""
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise ShapeError("concat_channels expects (C,H,W) tensors")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(
            f"concat_channels: spatial sizes {a.shape[1:]} and {b.shape[1:]} differ")
    ca = a.shape[0]
    out = np.concatenate([a.data, b.data], axis=0)

    def backward_fn(g):
        return g[:ca], g[ca:]

    return _node(out, (a, b), backward_fn)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Select channels [start, stop); gradient scatters back into place."""
    if x.data.ndim != 3:
        raise ShapeError(f"slice_channels expects (C,H,W), got {x.shape}")
    c = x.shape[0]
    if not (0 <= start <= stop <= c):
        raise ShapeError(f"slice_channels: [{start},{stop}) out of range for {c} channels")
    out = x.data[start:stop]

    def backward_fn(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _node(out, (x,), backward_fn)


# ---------------------------------------------------------------------------
# Pointwise


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g):
        return (np.where(x.data > 0, g, 0),)

    return _node(out, (x,), backward_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Numerically stable logistic; output strictly inside (0,1)."""
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward_fn(g):
        return (g * out * (1.0 - out),)

    return _node(out, (x,), backward_fn)


def tensor_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).astype(x.data.dtype),)

    return _node(out, (x,), backward_fn)


BCE_EPS = 1e-7


def bce(pred: Tensor, target, mask=None) -> Tensor:
    """Mean binary cross-entropy, optionally restricted to a pixel mask.

    Predictions are clamped to [BCE_EPS, 1-BCE_EPS] so exact 0/1 values stay
    finite; gradients are evaluated at the clamped values. ``target`` and
    ``mask`` carry no gradient. With a mask, the mean runs over mask-true
    elements only.
    """
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    t = t.astype(pred.data.dtype, copy=False)
    if t.shape != pred.shape:
        raise ShapeError(f"bce: pred {pred.shape} vs target {t.shape}")
    p = np.clip(pred.data, BCE_EPS, 1.0 - BCE_EPS)
    ew = -(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    if mask is not None:
        m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
        if m.shape != pred.shape:
            m = np.broadcast_to(m, pred.shape)
        m = m.astype(pred.data.dtype, copy=False)
        denom = m.sum()
        if denom == 0:
            raise ShapeError("bce: mask selects no elements")
        out = (ew * m).sum() / denom
        scale = m / denom
    else:
        out = ew.mean()
        scale = 1.0 / pred.data.size

    def backward_fn(g):
        # d/dp of the clamped elementwise loss; the clamp is treated as a
        # pass-through since sigmoid outputs only touch it in degenerate cases.
        gp = g * scale * (p - t) / (p * (1.0 - p))
        return (gp.astype(pred.data.dtype, copy=False),)

    return _node(np.asarray(out, dtype=pred.data.dtype), (pred,), backward_fn)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    """Bias-corrected Adam accumulator state for an ordered parameter list."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    def __init__(self, params, learning_rate=1e-4, beta1=0.9, beta2=0.999,
                 epsilon=1e-8):
        if isinstance(params, dict):
            params = list(params.values())
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)
        self.state.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.state.second_moment = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        zero_grad(self.params)

    def step(self):
        s = self.state
        s.step_count += 1
        t = s.step_count
        bc1 = 1.0 - s.beta1 ** t
        bc2 = 1.0 - s.beta2 ** t
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ValueError(
                    f"adam step: parameter {i} has no gradient; run backward() first")
            g = p.grad
            s.first_moment[i] = s.beta1 * s.first_moment[i] + (1.0 - s.beta1) * g
            s.second_moment[i] = s.beta2 * s.second_moment[i] + (1.0 - s.beta2) * g * g
            m_hat = s.first_moment[i] / bc1
            v_hat = s.second_moment[i] / bc2
            p.data = p.data - s.learning_rate * m_hat / (np.sqrt(v_hat) + s.epsilon)


def adam_step(params, state_or_optimizer):
    """Functional wrapper: apply one Adam update to ``params`` in place."""
    if isinstance(state_or_optimizer, Adam):
        opt = state_or_optimizer
    else:
        opt = Adam.__new__(Adam)
        opt.params = list(params.values()) if isinstance(params, dict) else list(params)
        opt.state = state_or_optimizer
    opt.step()
    return opt.state
