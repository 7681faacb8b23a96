"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Every operation records its parents and a closure
that routes the output gradient back to them; ``Tensor.backward`` walks the
graph once in reverse topological order. Keeps to the handful of primitives
the sequence models here actually need.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes cannot be combined."""


_GRAD_ENABLED = [True]


class no_grad:
    """Context manager that disables graph recording (evaluation paths)."""

    def __enter__(self):
        _GRAD_ENABLED.append(False)
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED.pop()
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._grad_fn = None
        self._op = "leaf"

    # -- basic introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- autodiff ------------------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.data.shape}")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._grad_fn is not None and node.grad is not None:
                node._grad_fn(node.grad)

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _wrap(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def parameter(data, dtype=None) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


def _topo_order(root: Tensor) -> list:
    """Iterative DFS postorder; each node appears exactly once."""
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def _acc(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _result(data, parents, op: str, grad_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn
        out._op = op
    return out


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def gradients(loss: Tensor, params) -> list:
    """Fresh gradients of `loss` with respect to `params`."""
    zero_grads(params)
    loss.backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]


# -- elementwise and linear ops ----------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g, b.shape))

    return _result(data, (a, b), "add", grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(-g, b.shape))

    return _result(data, (a, b), "sub", grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _acc(b, _unbroadcast(g * a.data, b.shape))

    return _result(data, (a, b), "mul", grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    data = a.data * a.dtype.type(s)

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, g * a.dtype.type(s))

    return _result(data, (a,), "scale", grad_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D or higher operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def grad_fn(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _acc(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _acc(b, _unbroadcast(gb, b.shape))

    return _result(data, (a, b), "matmul", grad_fn)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.transpose(a.data, axes)

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, np.transpose(g, inv))

    return _result(data, (a,), "transpose", grad_fn)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, g.reshape(a.shape))

    return _result(data, (a,), "reshape", grad_fn)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    data = np.where(keep, a.data, a.dtype.type(0))

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, g * keep)

    return _result(data, (a,), "relu", grad_fn)


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def grad_fn(g):
        if a.requires_grad:
            if axis is None:
                _acc(a, np.broadcast_to(g, a.shape).copy())
            else:
                _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _result(data, (a,), "sum", grad_fn)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis=axis), 1.0 / n)


# -- normalization and nonlinearities over the last axis ----------------------

def softmax(a: Tensor) -> Tensor:
    x = a.data
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    data = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            _acc(a, data * (g - dot))

    return _result(data, (a,), "softmax", grad_fn)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse

    def grad_fn(g):
        if a.requires_grad:
            _acc(a, g - np.exp(data) * g.sum(axis=-1, keepdims=True))

    return _result(data, (a,), "log_softmax", grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match feature dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    data = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        if gain.requires_grad:
            _acc(gain, (g * xhat).sum(axis=lead))
        if bias.requires_grad:
            _acc(bias, g.sum(axis=lead))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            _acc(x, inv * (gx_hat - m1 - xhat * m2))

    return _result(data, (x, gain, bias), "layer_norm", grad_fn)


# -- convolution and pooling ---------------------------------------------------

def conv1d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution over the middle (time) axis.

    x: (B, T, C_in), w: (K, C_in, C_out), b: (C_out,). Output (B, T-K+1, C_out).
    """
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d_valid expects x (B,T,C) and w (K,C,O), got {x.shape}, {w.shape}")
    K, cin, cout = w.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d_valid channel mismatch: x {x.shape} vs w {w.shape}")
    if x.shape[1] < K:
        raise ShapeError(f"conv1d_valid input length {x.shape[1]} shorter than kernel {K}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, K, axis=1)  # (B, T', C, K)
    data = np.einsum("btck,kco->bto", win, w.data, optimize=True) + b.data
    tprime = data.shape[1]

    def grad_fn(g):
        if b.requires_grad:
            _acc(b, g.sum(axis=(0, 1)))
        if w.requires_grad:
            _acc(w, np.einsum("btck,bto->kco", win, g, optimize=True))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            for k in range(K):
                gx[:, k:k + tprime, :] += np.matmul(g, w.data[k].T)
            _acc(x, gx)

    return _result(data, (x, w, b), "conv1d", grad_fn)


def max_axis(x: Tensor, axis: int) -> Tensor:
    """Max reduction; gradient flows to the first occurrence on ties."""
    idx = np.argmax(x.data, axis=axis)
    data = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            _acc(x, gx)

    return _result(data, (x,), "max", grad_fn)


# -- gathers -------------------------------------------------------------------

def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Rows of a (N, d) tensor by integer index array of any shape.

    Output shape idx.shape + (d,). Backward scatter-adds, so repeated
    indices accumulate. Doubles as the embedding lookup.
    """
    idx = np.asarray(idx)
    if x.ndim != 2:
        raise ShapeError(f"take_rows expects a 2-D source, got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"take_rows index out of range [0, {x.shape[0]}): [{idx.min()}, {idx.max()}]")
    data = x.data[idx]

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[1]))
            _acc(x, gx)

    return _result(data, (x,), "take_rows", grad_fn)


def take_last(x: Tensor, idx: np.ndarray) -> Tensor:
    """Fancy gather on the last axis: out[..., s] = x[..., idx[s]]."""
    idx = np.asarray(idx)
    data = x.data[..., idx]

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            lead = int(np.prod(x.shape[:-1], dtype=np.int64)) if x.ndim > 1 else 1
            gx2 = gx.reshape(lead, x.shape[-1])
            g2 = g.reshape(lead, idx.size)
            flat = idx.reshape(-1)
            for i in range(lead):
                np.add.at(gx2[i], flat, g2[i])
            _acc(x, gx)

    return _result(data, (x,), "take_last", grad_fn)


def take_pairwise(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-row gather on the last axis.

    x: (A, B) or (H, A, B); idx: (A, C) ints. out[..., a, c] = x[..., a, idx[a, c]].
    """
    idx = np.asarray(idx)
    if idx.ndim != 2 or idx.shape[0] != x.shape[-2]:
        raise ShapeError(f"take_pairwise index {idx.shape} does not match source {x.shape}")
    if x.ndim == 2:
        data = np.take_along_axis(x.data, idx, axis=1)
    elif x.ndim == 3:
        data = np.take_along_axis(x.data, np.broadcast_to(idx, (x.shape[0],) + idx.shape), axis=2)
    else:
        raise ShapeError(f"take_pairwise expects 2-D or 3-D source, got {x.shape}")
    rows = np.arange(idx.shape[0])[:, None]

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            if x.ndim == 2:
                np.add.at(gx, (rows, idx), g)
            else:
                for h in range(x.shape[0]):
                    np.add.at(gx[h], (rows, idx), g[h])
            _acc(x, gx)

    return _result(data, (x,), "take_pairwise", grad_fn)


def slice_axis0(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[start:stop]

    def grad_fn(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[start:stop] = g
            _acc(x, gx)

    return _result(data, (x,), "slice0", grad_fn)


# -- masking, losses, regularization -------------------------------------------

MASK_FILL = -1e9  # large negative constant; softmax of an all-masked row is uniform


def masked_fill(x: Tensor, mask: np.ndarray, value: float = MASK_FILL) -> Tensor:
    """Replace entries where boolean `mask` is True; no gradient through them."""
    mask = np.asarray(mask, dtype=bool)
    data = np.where(mask, x.dtype.type(value), x.data)

    def grad_fn(g):
        if x.requires_grad:
            _acc(x, np.where(mask, x.dtype.type(0), g))

    return _result(data, (x,), "masked_fill", grad_fn)


def nll_loss(logp: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    """Mean negative log likelihood of `targets` under row log-probabilities."""
    loss, count = nll_sum(logp, targets, ignore_index)
    if count == 0:
        raise ValueError("nll_loss: no unignored targets")
    return scale(loss, 1.0 / count)


def nll_sum(logp: Tensor, targets: np.ndarray, ignore_index: int | None = None):
    """Summed NLL plus the count of contributing targets (for batch pooling)."""
    targets = np.asarray(targets)
    if logp.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logp.shape[0]:
        raise ShapeError(f"nll shapes disagree: logp {logp.shape}, targets {targets.shape}")
    keep = np.ones_like(targets, dtype=bool) if ignore_index is None else targets != ignore_index
    rows = np.nonzero(keep)[0]
    cols = targets[keep]
    data = np.asarray(-logp.data[rows, cols].sum(), dtype=logp.dtype)

    def grad_fn(g):
        if logp.requires_grad:
            gx = np.zeros_like(logp.data)
            np.add.at(gx, (rows, cols), -g)
            _acc(logp, gx)

    return _result(data, (logp,), "nll", grad_fn), int(keep.sum())


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_index: int | None = None) -> Tensor:
    return nll_loss(log_softmax(logits), targets, ignore_index)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout. rate 0 (or rng None) is the identity and draws nothing."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    keep /= x.dtype.type(1.0 - rate)

    def grad_fn(g):
        if x.requires_grad:
            _acc(x, g * keep)

    return _result(x.data * keep, (x,), "dropout", grad_fn)


def sinusoid_table(positions: np.ndarray, d: int, dtype=np.float64) -> np.ndarray:
    """Classic fixed sine/cosine position code, one row per entry of `positions`."""
    if d % 2:
        raise ShapeError(f"sinusoid table needs an even width, got {d}")
    positions = np.asarray(positions, dtype=np.float64)
    half = np.arange(d // 2, dtype=np.float64)
    freq = np.power(10000.0, -2.0 * half / d)
    ang = positions[:, None] * freq[None, :]
    out = np.empty((positions.shape[0], d), dtype=dtype)
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


# -- finite-difference oracle ---------------------------------------------------

@dataclass
class ParamCheck:
    name: str
    max_err: float
    worst_coord: tuple
    n_checked: int
    nonfinite: bool = False


@dataclass
class FdReport:
    ok: bool
    tol: float
    params: list = field(default_factory=list)

    @property
    def max_err(self) -> float:
        return max((p.max_err for p in self.params), default=0.0)

    def __str__(self):
        lines = [f"gradient check: {'ok' if self.ok else 'FAILED'} (tol {self.tol:g})"]
        for p in self.params:
            flag = " nonfinite!" if p.nonfinite else ""
            lines.append(f"  {p.name}: max_err {p.max_err:.3e} at {p.worst_coord} ({p.n_checked} coords){flag}")
        return "\n".join(lines)


def finite_difference_check(f, params, names=None, eps: float = 1e-5, tol: float = 1e-4,
                            max_coords: int | None = None, rng: np.random.Generator | None = None) -> FdReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    `f` must be deterministic and close over `params`. Error metric is
    |analytic - numeric| / max(1, |analytic|, |numeric|); with `max_coords`
    set, that many coordinates per parameter are sampled (seeded by `rng`).
    """
    params = list(params)
    if names is None:
        names = [f"param{i}" for i in range(len(params))]
    if rng is None:
        rng = np.random.default_rng(0)
    loss = f()
    analytic = gradients(loss, params)

    report = FdReport(ok=True, tol=tol)
    for p, g, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst, worst_c, bad = 0.0, (), False
        ga = g.reshape(-1)
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            fp = float(f().data)
            flat[c] = keep - eps
            fm = float(f().data)
            flat[c] = keep
            num = (fp - fm) / (2.0 * eps)
            if not (math.isfinite(num) and math.isfinite(float(ga[c]))):
                bad = True
                worst, worst_c = float("inf"), np.unravel_index(c, p.shape)
                break
            err = abs(float(ga[c]) - num) / max(1.0, abs(float(ga[c])), abs(num))
            if err > worst:
                worst, worst_c = err, np.unravel_index(c, p.shape)
        report.params.append(ParamCheck(name, worst, worst_c, len(coords), bad))
        if worst > tol or bad:
            report.ok = False
    return report
