"""Connectionist temporal classification: loss, gradient, and decoders.

Blank id is 0; gloss ids are 1..G. The loss marginalizes over all frame
alignments of the blank-extended target with a log-space forward-backward
recursion. Two interchangeable kernels compute it: a compiled Cython loop
and a vectorized numpy fallback, selected at import (override with the
SIGNSEQ_CTC environment variable: auto | python | cython).
"""

from __future__ import annotations

import math
import os
import warnings

import numpy as np

from .tensor import Tensor, _acc, _result

NEG_INF = float("-inf")

try:
    from . import _ctc_kernel as _kernel
except ImportError:
    _kernel = None

_FORCE = os.environ.get("SIGNSEQ_CTC", "auto")
if _FORCE not in ("auto", "python", "cython"):
    raise ValueError(f"SIGNSEQ_CTC must be auto|python|cython, got {_FORCE!r}")
if _FORCE == "cython" and _kernel is None:
    raise ImportError("SIGNSEQ_CTC=cython but the compiled kernel is not built")


def active_backend() -> str:
    if _FORCE == "python" or _kernel is None:
        return "python"
    return "cython"


class CtcInfeasible(UserWarning):
    """Target cannot be aligned to the given frame count (not a numeric overflow)."""


def extended_labels(labels: np.ndarray) -> np.ndarray:
    """Blank-extended target: blank, y1, blank, ..., yU, blank (length 2U+1)."""
    z = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    z[1::2] = labels
    return z


def min_frames(labels: np.ndarray) -> int:
    """Fewest frames that can emit the target: length plus adjacent repeats."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0
    return int(len(labels) + np.sum(labels[1:] == labels[:-1]))


def _validate(logp: np.ndarray, labels: np.ndarray):
    if logp.ndim != 2:
        raise ValueError(f"ctc expects (T, V) log scores, got shape {logp.shape}")
    v = logp.shape[1]
    if v < 2:
        raise ValueError(f"ctc needs the blank plus at least one gloss, got V={v}")
    if len(labels) and (labels.min() < 1 or labels.max() >= v):
        raise ValueError(f"gloss ids must lie in [1, {v - 1}] (0 is the blank), got {labels.tolist()}")


def forward_backward_python(logp: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Numpy fallback kernel. Returns (loss, dloss/dlogp); assumes feasibility."""
    t_len, v = logp.shape
    z = extended_labels(labels)
    s_len = len(z)
    allow = np.zeros(s_len, dtype=bool)
    allow[2:] = (z[2:] != 0) & (z[2:] != z[:-2])

    alpha = np.full((t_len, s_len), NEG_INF)
    alpha[0, 0] = logp[0, z[0]]
    if s_len > 1:
        alpha[0, 1] = logp[0, z[1]]
    for t in range(1, t_len):
        prev = alpha[t - 1]
        # shifted views sliced back to s_len so one- and two-state targets work
        b = np.concatenate(([NEG_INF], prev))[:s_len]
        c = np.concatenate(([NEG_INF, NEG_INF], prev))[:s_len]
        c = np.where(allow, c, NEG_INF)
        alpha[t] = np.logaddexp(np.logaddexp(prev, b), c) + logp[t, z]

    if s_len > 1:
        ll = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    else:
        ll = alpha[-1, -1]

    beta = np.full((t_len, s_len), NEG_INF)
    beta[-1, -1] = 0.0
    if s_len > 1:
        beta[-1, -2] = 0.0
    allow_next = np.zeros(s_len, dtype=bool)
    allow_next[:-2] = allow[2:]
    for t in range(t_len - 2, -1, -1):
        nxt = beta[t + 1] + logp[t + 1, z]
        b = np.concatenate((nxt[1:], [NEG_INF]))
        c = np.concatenate((nxt[2:], [NEG_INF, NEG_INF]))[:s_len]
        c = np.where(allow_next, c, NEG_INF)
        beta[t] = np.logaddexp(np.logaddexp(nxt, b), c)

    grad = np.zeros_like(logp)
    occ = alpha + beta - ll
    tt = np.arange(t_len)[:, None]
    np.add.at(grad, (tt, z[None, :]), -np.exp(occ))
    return float(-ll), grad


def forward_backward_cython(logp: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if _kernel is None:
        raise RuntimeError("compiled CTC kernel is not available")
    logp64 = np.ascontiguousarray(logp, dtype=np.float64)
    loss, occ, z = _kernel.forward_backward(logp64, np.ascontiguousarray(labels, dtype=np.int64))
    # same closing expression as the fallback, so the exp is the same code
    grad = np.zeros_like(logp64)
    tt = np.arange(logp64.shape[0])[:, None]
    np.add.at(grad, (tt, z[None, :]), -np.exp(occ))
    return float(loss), grad


def forward_backward(logp: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    if active_backend() == "cython":
        return forward_backward_cython(logp, labels)
    return forward_backward_python(logp, labels)


def ctc_loss(logp: Tensor, labels) -> Tensor:
    """Negative log likelihood of `labels` under per-frame log scores.

    Infeasible targets (more emissions required than frames available) give
    +inf with a CtcInfeasible warning so callers can tell the case apart
    from numeric overflow; the gradient is zero there.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    _validate(logp.data, labels)
    t_len = logp.shape[0]
    need = min_frames(labels)
    if t_len < need:
        warnings.warn(
            f"target needs {need} frames ({len(labels)} glosses plus repeats) but only {t_len} are available",
            CtcInfeasible, stacklevel=2)
        loss, grad = float("inf"), np.zeros_like(logp.data, dtype=np.float64)
    else:
        loss, grad = forward_backward(logp.data.astype(np.float64, copy=False), labels)

    def grad_fn(g):
        if logp.requires_grad:
            _acc(logp, (g * grad).astype(logp.dtype, copy=False))

    return _result(np.asarray(loss, dtype=logp.dtype), (logp,), "ctc", grad_fn)


# -- decoders ------------------------------------------------------------------

def collapse_path(path) -> list[int]:
    """Merge repeats, then drop blanks."""
    out, prev = [], None
    for p in path:
        if p != prev and p != 0:
            out.append(int(p))
        prev = p
    return out


def ctc_greedy_decode(logp: np.ndarray) -> list[int]:
    """Best per-frame symbol, collapsed."""
    return collapse_path(np.argmax(np.asarray(logp), axis=1))


def _lae(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a < b:
        a, b = b, a
    return a + math.log1p(math.exp(b - a))


def ctc_beam_search(logp: np.ndarray, beam_width: int = 5) -> list[int]:
    """Prefix beam search over collapsed label sequences.

    Each surviving prefix keeps separate log masses for alignments ending
    in blank and in its last symbol; pruning ranks prefixes by total mass
    with deterministic ties (shorter, then lexicographic).
    """
    logp = np.asarray(logp, dtype=np.float64)
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    t_len, v = logp.shape
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for t in range(t_len):
        row = logp[t].tolist()
        new: dict[tuple, tuple[float, float]] = {}
        for prefix, (pb, pnb) in beams.items():
            total = _lae(pb, pnb)
            # stay on this prefix via a blank frame
            b0, b1 = new.get(prefix, (NEG_INF, NEG_INF))
            b0 = _lae(b0, total + row[0])
            # or via a repeat of its last symbol
            if prefix:
                b1 = _lae(b1, pnb + row[prefix[-1]])
            new[prefix] = (b0, b1)
            for c in range(1, v):
                ext = prefix + (c,)
                # extending with the same symbol needs a blank in between
                mass = pb if (prefix and c == prefix[-1]) else total
                e0, e1 = new.get(ext, (NEG_INF, NEG_INF))
                new[ext] = (e0, _lae(e1, mass + row[c]))
        ranked = sorted(new.items(), key=lambda kv: (-_lae(*kv[1]), len(kv[0]), kv[0]))
        beams = dict(ranked[:beam_width])
    best = min(beams.items(), key=lambda kv: (-_lae(*kv[1]), len(kv[0]), kv[0]))
    return list(best[0])
