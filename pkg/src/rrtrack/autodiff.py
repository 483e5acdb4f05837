"""Minimal reverse-mode autodiff engine on numpy arrays.

Covers exactly the operations the tracker network needs: conv2d, 2x2 max
pooling, fully connected layers, PReLU, elementwise tanh/sigmoid/add/mul,
concat, reshape and an L1 loss, plus the Adam optimizer and a
finite-difference gradient checker.

Operations executed while a :class:`Graph` is active are recorded on its
tape; ``Graph.backward`` replays the tape in reverse and accumulates
gradients into every tensor with ``requires_grad``. Without an active
graph the same functions run forward-only, which is what inference uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the dtype new tensors default to (float32 or float64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


class Tensor:
    """A numpy array plus an optional gradient buffer.

    ``requires_grad`` marks leaves the user wants gradients for;
    intermediate results inherit it from their inputs so gradient flow is
    not cut off mid-graph.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, own: bool = False) -> None:
        # Additive accumulation across fan-out. ``own=True`` promises g is
        # a fresh array no one else references, so the first accumulation
        # can adopt it without copying.
        if self.grad is None:
            self.grad = g if own else np.array(g)
        else:
            self.grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class _Recorded:
    out: Tensor
    backward: "callable"


class Graph:
    """Tape of recorded operations, replayed in reverse by backward().

    A graph and its tensors belong to a single worker; there is no
    locking. Use as a context manager around the forward pass.
    """

    def __init__(self):
        self._tape: list[_Recorded] = []

    def __enter__(self) -> "Graph":
        _push_graph(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _pop_graph(self)
        return False

    def __len__(self):
        return len(self._tape)

    def record(self, out: Tensor, backward) -> None:
        self._tape.append(_Recorded(out, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad tensor reachable from loss."""
        if loss.data.ndim != 0 and loss.data.size != 1:
            raise ValueError("backward requires a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self._tape):
            if rec.out.grad is None:
                continue  # node not on any path to the loss
            rec.backward(rec.out.grad)


_GRAPH_STACK: list[Graph] = []


def _push_graph(g: Graph) -> None:
    _GRAPH_STACK.append(g)


def _pop_graph(g: Graph) -> None:
    if not _GRAPH_STACK or _GRAPH_STACK[-1] is not g:
        raise RuntimeError("graph context exited out of order")
    _GRAPH_STACK.pop()


def _active_graph() -> Graph | None:
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _make_out(data: np.ndarray, *inputs: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.name = None
    return out


def _record(out: Tensor, backward) -> None:
    g = _active_graph()
    if g is not None and out.requires_grad:
        g.record(out, backward)


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


# ---------------------------------------------------------------------------
# elementwise and shape ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; b may be a [D] vector added to every row of [N, D]."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    out = _make_out(a.data + b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    _record(out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product with the same limited broadcast as add."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    out = _make_out(a.data * b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), own=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), own=True)

    _record(out, backward)
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str) -> None:
    # Equal shapes, or a trailing-aligned vector against a matrix (bias-style).
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{opname}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    n_extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(n_extra)))


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python constant (not differentiated w.r.t. s)."""
    a = as_tensor(a)
    out = _make_out(a.data * s, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s, own=True)

    _record(out, backward)
    return out


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    out = _make_out(y, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - y * y), own=True)

    _record(out, backward)
    return out


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = _kernels.sigmoid(a.data)  # sign-split form, stable for large |x|
    out = _make_out(y, a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * y * (1.0 - y), own=True)

    _record(out, backward)
    return out


def concat(tensors, axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(
                i != axis and s[i] != ref[i] for i in range(len(ref))):
            raise ShapeError(f"concat: mismatched shapes {ref} vs {s} on axis {axis}")
    out = _make_out(np.concatenate([t.data for t in tensors], axis=axis), *tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    _record(out, backward)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    out = _make_out(a.data.reshape(shape), a)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.data.shape))

    _record(out, backward)
    return out


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.data.shape[0], -1))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: {a.data.shape} @ {b.data.shape}")
    out = _make_out(a.data @ b.data, a, b)

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.T, own=True)
        if b.requires_grad:
            b.accumulate_grad(a.data.T @ g, own=True)

    _record(out, backward)
    return out


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,D] @ weight[D,M] + bias[M]."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if bias.data.shape != (weight.data.shape[1],):
        raise ShapeError(f"fully_connected: bias {bias.data.shape} vs weight {weight.data.shape}")
    return add(matmul(x, weight), bias)


# ---------------------------------------------------------------------------
# convolution / pooling


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D convolution with zero padding.

    x: [N, C, H, W], kernel: [K, C, kh, kw], bias: [K].
    Output spatial size: floor((H + 2*pad - kh) / stride) + 1.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.data.shape
    k, ck, kh, kw = kernel.data.shape
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias.data.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.data.shape}, want ({k},)")
    if stride < 1:
        raise ShapeError("conv2d: stride must be >= 1")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeError("conv2d: kernel larger than padded input")

    hp, wp = h + 2 * pad, w + 2 * pad
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    if pad:
        xp = np.zeros((n, c, hp, wp), dtype=x.data.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x.data
    else:
        xp = x.data

    # im2col: one big GEMM does the whole convolution.
    cols = _kernels.im2col(xp, kh, kw, stride)     # [N*ho*wo, C*kh*kw]
    kmat = kernel.data.reshape(k, c * kh * kw)
    y = cols @ kmat.T + bias.data
    out = _make_out(
        np.ascontiguousarray(y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)),
        x, kernel, bias)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, k)
        if bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0), own=True)
        if kernel.requires_grad:
            kernel.accumulate_grad((gm.T @ cols).reshape(kernel.data.shape),
                                   own=True)
        if x.requires_grad:
            gcols = gm @ kmat                      # [N*ho*wo, C*kh*kw]
            gx = _kernels.col2im(gcols, n, c, hp, wp, kh, kw, stride, ho, wo)
            if pad:
                gx = np.ascontiguousarray(gx[:, :, pad:pad + h, pad:pad + w])
            x.accumulate_grad(gx, own=True)

    _record(out, backward)
    return out


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    (row-major) maximal element of each window."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("maxpool2x2 expects [N, C, H, W]")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2: H and W must be even, got {h}x{w}")
    y, arg = _kernels.maxpool_fwd(x.data)  # arg: first row-major max per window
    out = _make_out(y, x)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(_kernels.maxpool_bwd(g, arg), own=True)

    _record(out, backward)
    return out


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """PReLU with one learnable slope per channel.

    Channel axis is 1 for 4-D inputs and the last axis for 2-D inputs.
    """
    x, slope = as_tensor(x), as_tensor(slope)
    if x.data.ndim == 4:
        cax = 1
    elif x.data.ndim == 2:
        cax = x.data.ndim - 1
    else:
        raise ShapeError("prelu expects 2-D or 4-D input")
    nc = x.data.shape[cax]
    if slope.data.shape != (nc,):
        raise ShapeError(f"prelu: slope shape {slope.data.shape}, want ({nc},)")
    # elements sharing a channel are `inner` apart in the flat layout
    inner = int(np.prod(x.data.shape[cax + 1:], dtype=np.int64))
    out = _make_out(_kernels.prelu_fwd(x.data, slope.data, inner), x, slope)

    def backward(g):
        if x.requires_grad or slope.requires_grad:
            gx, gs = _kernels.prelu_bwd(g, x.data, slope.data, inner)
            if x.requires_grad:
                x.accumulate_grad(gx, own=True)
            if slope.requires_grad:
                slope.accumulate_grad(gs, own=True)

    _record(out, backward)
    return out


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements; subgradient 0 at ties."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"l1_loss: {pred.data.shape} vs {target.data.shape}")
    diff = pred.data - target.data
    out = _make_out(np.asarray(np.mean(np.abs(diff))), pred, target)
    inv = 1.0 / diff.size

    def backward(g):
        s = np.sign(diff) * (g * inv)  # sign(0) == 0
        if pred.requires_grad:
            pred.accumulate_grad(s, own=not target.requires_grad)
        if target.requires_grad:
            target.accumulate_grad(-s, own=True)

    _record(out, backward)
    return out


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements (scalar)."""
    x = as_tensor(x)
    out = _make_out(np.asarray(x.data.sum()), x)

    def backward(g):
        if x.requires_grad:
            x.accumulate_grad(np.full_like(x.data, float(g)), own=True)

    _record(out, backward)
    return out


def mean_of(losses) -> Tensor:
    """Mean of a list of scalar tensors (e.g. per-step losses)."""
    losses = list(losses)
    if not losses:
        raise ValueError("mean_of: empty sequence")
    total = losses[0]
    for t in losses[1:]:
        total = add(total, t)
    return scale(total, 1.0 / len(losses))


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """Per-parameter Adam buffers; both moments start at zero."""
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor, lr: float = 1e-3, beta1: float = 0.9,
                  beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data),
                   lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)


class NonFiniteGradient(FloatingPointError):
    """Raised when an update would apply a NaN/inf gradient."""


def adam_step(param: Tensor, grad: np.ndarray, state: AdamState,
              lr: float | None = None) -> None:
    """Standard Adam update with bias correction, in place.

    A non-finite gradient raises before any state is touched.
    """
    if grad.shape != param.data.shape:
        raise ShapeError(f"adam_step: grad {grad.shape} vs param {param.data.shape}")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(f"non-finite gradient for {param.name or 'param'}")
    if lr is None:
        lr = state.lr
    if lr <= 0:
        raise ValueError("adam_step: lr must be positive")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    param.data -= lr * mhat / (np.sqrt(vhat) + state.epsilon)


class Adam:
    """Adam over a named parameter dict; keeps one AdamState per tensor."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = params
        self.lr = lr
        self.states = {name: AdamState.for_param(p, lr, beta1, beta2, epsilon)
                       for name, p in params.items()}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adam_step(p, p.grad, self.states[name], lr=lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckFailure:
    param: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    failures: list = field(default_factory=list)
    non_finite: bool = False

    @property
    def passed(self) -> bool:
        return not self.failures and not self.non_finite


def _rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(build, params: dict[str, Tensor], eps: float = 1e-5,
               tol: float = 1e-5, rng: np.random.Generator | None = None,
               coords_per_param: int = 4) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``build`` reconstructs the scalar loss from the current parameter
    values; it is called once under a recording graph and twice per
    sampled coordinate for the differences. Run in double precision:
    eps=1e-5 leaves no headroom in float32.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.zero_grad()
    with Graph() as g:
        loss = build()
    if not np.isfinite(loss.data):
        return GradCheckReport(max_rel_error=math.inf, n_checked=0, non_finite=True)
    g.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()}

    report = GradCheckReport(max_rel_error=0.0, n_checked=0)
    for name, p in params.items():
        size = p.data.size
        if size <= coords_per_param:
            picks = np.arange(size)
        else:
            picks = rng.choice(size, size=coords_per_param, replace=False)
        flat = p.data.reshape(-1)
        for k in picks:
            orig = flat[k]
            flat[k] = orig + eps
            up = float(build().data)
            flat[k] = orig - eps
            down = float(build().data)
            flat[k] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                report.non_finite = True
                continue
            numeric = (up - down) / (2.0 * eps)
            ana = float(analytic[name].reshape(-1)[k])
            err = _rel_error(ana, numeric)
            report.n_checked += 1
            report.max_rel_error = max(report.max_rel_error, err)
            if err > tol:
                report.failures.append(GradCheckFailure(
                    name, np.unravel_index(k, p.data.shape), ana, numeric, err))
    return report
