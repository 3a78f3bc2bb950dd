"""Dense float64 tensors with hand-derived reverse-mode gradients.

Every operation records a backward closure on a static tape; calling
``backward()`` on a scalar result accumulates gradients into ``grad`` of
each reachable leaf. Gradients are additive across uses; callers zero
them between optimization steps. All outputs are checked for finiteness
(NaN/Inf raises NumericError rather than propagating silently).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError, ShapeError

__all__ = [
    "Tensor",
    "GradCheckReport",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "conv1d_causal",
    "relu",
    "sigmoid",
    "absolute",
    "tsum",
    "tmean",
    "mix_nodes",
    "mix_channels",
    "collapse_readout",
    "row_normalize",
    "slice_axis",
    "reshape",
    "element",
    "check_gradients",
]


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A float64 array plus an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, seed=None):
        """Reverse-mode sweep from this tensor.

        Without an explicit seed the tensor must be scalar. The tape is
        walked once in reverse topological order.
        """
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without seed needs a scalar, got shape {self.data.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed shape {seed.shape} does not match tensor shape {self.data.shape}"
                )

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(seed)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _check_finite(data, op)
    out.grad = None
    out.name = None
    needs = any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out._parents = tuple(parents) if needs else ()
    out._backward_fn = backward_fn if needs else None
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape {a.data.shape} vs shape {b.data.shape}")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(-g)

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * bd)
        if b.requires_grad:
            b._accumulate(g * ad)

    return _make(ad * bd, "mul", (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * c)

    return _make(a.data * c, "scale", (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shape {a.data.shape} vs shape {b.data.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ bd.T)
        if b.requires_grad:
            b._accumulate(ad.T @ g)

    return _make(ad @ bd, "matmul", (a, b), backward)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got shape {a.data.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.T)

    return _make(a.data.T.copy(), "transpose", (a,), backward)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0  # subgradient at exactly 0 is 0

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * pos)

    return _make(np.where(pos, a.data, 0.0), "relu", (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # overflow-free form: exponentiate only non-positive values
    e = np.exp(-np.abs(a.data))
    s = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * s * (1.0 - s))

    return _make(s, "sigmoid", (a,), backward)


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)  # 0 at exact ties, matching the MAE subgradient choice

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * sign)

    return _make(np.abs(a.data), "abs", (a,), backward)


def tsum(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(shape, float(g)))

    return _make(np.asarray(a.data.sum()), "sum", (a,), backward)


def tmean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.full(shape, float(g) / n))

    return _make(np.asarray(a.data.mean()), "mean", (a,), backward)


def conv1d_causal(x, kernels) -> Tensor:
    """Causal 1-d convolution along the last axis.

    ``x`` has shape (..., C_in, T) and ``kernels`` (C_out, C_in, K);
    the output at position t combines inputs t..t+K-1, giving shape
    (..., C_out, T-K+1).
    """
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim < 2 or kernels.data.ndim != 3:
        raise ShapeError(
            f"conv1d_causal: shape {x.data.shape} vs kernel shape {kernels.data.shape}"
        )
    c_out, c_in, k = kernels.data.shape
    if x.data.shape[-2] != c_in:
        raise ShapeError(
            f"conv1d_causal: input channels {x.data.shape[-2]} vs kernel channels {c_in}"
        )
    t_len = x.data.shape[-1]
    if t_len < k:
        raise ShapeError(
            f"conv1d_causal: input length {t_len} shorter than kernel size {k}"
        )
    xd, wd = x.data, kernels.data
    t_out = t_len - k + 1
    # sum of K shifted matmuls keeps the inner product in BLAS
    out = wd[:, :, 0] @ xd[..., :, 0:t_out]
    for kk in range(1, k):
        out += wd[:, :, kk] @ xd[..., :, kk : kk + t_out]

    def backward(g):
        if kernels.requires_grad:
            gw = np.empty_like(wd)
            gmat = np.ascontiguousarray(np.moveaxis(g, -2, 0)).reshape(c_out, -1)
            for kk in range(k):
                xmat = np.ascontiguousarray(
                    np.moveaxis(xd[..., :, kk : kk + t_out], -2, 0)
                ).reshape(c_in, -1)
                gw[:, :, kk] = gmat @ xmat.T
            kernels._accumulate(gw)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for kk in range(k):
                gx[..., :, kk : kk + t_out] += wd[:, :, kk].T @ g
            x._accumulate(gx)

    return _make(out, "conv1d_causal", (x, kernels), backward)


def mix_nodes(a, h) -> Tensor:
    """Graph propagation: out[b,i,c,t] = sum_j A[i,j] * H[b,j,c,t]."""
    a, h = _as_tensor(a), _as_tensor(h)
    if a.data.ndim != 2 or h.data.ndim != 4 or a.data.shape[1] != h.data.shape[1]:
        raise ShapeError(f"mix_nodes: shape {a.data.shape} vs shape {h.data.shape}")
    ad, hd = a.data, h.data
    bsz, n, c, t = hd.shape
    hflat = hd.reshape(bsz, n, c * t)
    out = (ad @ hflat).reshape(bsz, n, c, t)

    def backward(g):
        gflat = g.reshape(bsz, n, c * t)
        if a.requires_grad:
            a._accumulate(np.matmul(gflat, hflat.transpose(0, 2, 1)).sum(axis=0))
        if h.requires_grad:
            h._accumulate((ad.T @ gflat).reshape(bsz, n, c, t))

    return _make(out, "mix_nodes", (a, h), backward)


def mix_channels(h, w) -> Tensor:
    """Per-node feature map: out[b,i,d,t] = sum_c H[b,i,c,t] * W[c,d]."""
    h, w = _as_tensor(h), _as_tensor(w)
    if h.data.ndim != 4 or w.data.ndim != 2 or h.data.shape[2] != w.data.shape[0]:
        raise ShapeError(f"mix_channels: shape {h.data.shape} vs shape {w.data.shape}")
    hd, wd = h.data, w.data
    ht = hd.transpose(0, 1, 3, 2)  # (b, i, t, c)
    out = (ht @ wd).transpose(0, 1, 3, 2)

    def backward(g):
        gt = g.transpose(0, 1, 3, 2)
        if h.requires_grad:
            h._accumulate((gt @ wd.T).transpose(0, 1, 3, 2))
        if w.requires_grad:
            hmat = np.ascontiguousarray(ht).reshape(-1, wd.shape[0])
            gmat = np.ascontiguousarray(gt).reshape(-1, wd.shape[1])
            w._accumulate(hmat.T @ gmat)

    return _make(out, "mix_channels", (h, w), backward)


def collapse_readout(h, w) -> Tensor:
    """Final readout: out[b,n,o] = sum_{c,t} H[b,n,c,t] * W[c,t,o]."""
    h, w = _as_tensor(h), _as_tensor(w)
    if (
        h.data.ndim != 4
        or w.data.ndim != 3
        or h.data.shape[2:] != w.data.shape[:2]
    ):
        raise ShapeError(f"collapse_readout: shape {h.data.shape} vs shape {w.data.shape}")
    hd, wd = h.data, w.data
    bsz, n, c, t = hd.shape
    o = wd.shape[2]
    hflat = hd.reshape(bsz * n, c * t)
    wflat = wd.reshape(c * t, o)
    out = (hflat @ wflat).reshape(bsz, n, o)

    def backward(g):
        gflat = g.reshape(bsz * n, o)
        if h.requires_grad:
            h._accumulate((gflat @ wflat.T).reshape(bsz, n, c, t))
        if w.requires_grad:
            w._accumulate((hflat.T @ gflat).reshape(c, t, o))

    return _make(out, "collapse_readout", (h, w), backward)


def row_normalize(a) -> Tensor:
    """Divide each row of a 2-d matrix by its sum (caller adds self-loops)."""
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_normalize: expected 2-d, got shape {a.data.shape}")
    s = a.data.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        raise NumericError("row_normalize: zero row sum (missing self-loops?)")
    out = a.data / s

    def backward(g):
        if a.requires_grad:
            dot = (g * a.data).sum(axis=1, keepdims=True)
            a._accumulate(g / s - dot / (s * s))

    return _make(out, "row_normalize", (a,), backward)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(shape)
            full[idx] = g
            a._accumulate(full)

    return _make(a.data[idx].copy(), "slice_axis", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    old = a.data.shape
    new = a.data.reshape(shape).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(g.reshape(old))

    return _make(new, "reshape", (a,), backward)


def element(a, index) -> Tensor:
    """Pick one scalar entry; gradient scatters back into that entry."""
    a = _as_tensor(a)
    index = tuple(index)
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(shape)
            full[index] = float(g)
            a._accumulate(full)

    return _make(np.asarray(a.data[index]), "element", (a,), backward)


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    max_relative_error: float
    parameter_count: int
    per_parameter_errors: list = field(default_factory=list)


def check_gradients(f, params, epsilon: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` is a deterministic closure over ``params`` returning a scalar
    Tensor. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
    denominator, elementwise.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for p in params:
        p.zero_grad()
    out = f()
    if not np.isfinite(out.data).all():
        raise NumericError("check_gradients: objective is non-finite")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    per_param = []
    worst = 0.0
    count = 0
    for p, ana in zip(params, analytic):
        count += p.data.size
        num = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = f().item()
            flat[i] = orig - epsilon
            lo = f().item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * epsilon)
        denom = np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(ana - num) / denom)) if flat.size else 0.0
        per_param.append(err)
        worst = max(worst, err)
    return GradCheckReport(worst, count, per_param)
