"""Scaled dot-product attention with disentangled relative position scores.

Pairwise scores decompose into content-to-content, content-to-position,
position-to-content and position-to-position dot products over a shared
learned table of clamped relative distances. The softmax scale is fixed at
1/sqrt(4 * d_head) whenever the relative machinery is active, independent
of how many of the four terms are enabled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

TERMS = ("c2c", "c2p", "p2c", "p2p")
SITES = ("enc", "dec", "cross")


def rel_bucket(i: int, j: int, l_max: int) -> int:
    """Table row for the (query i, key j) pair: clamp(i-j) shifted to [0, 2L-1]."""
    return int(np.clip(i - j, -l_max, l_max - 1)) + l_max


def bucket_matrix(q_idx: np.ndarray, k_idx: np.ndarray, l_max: int) -> np.ndarray:
    """rel_bucket evaluated for every query/key index pair."""
    q_idx = np.asarray(q_idx, dtype=np.int64)
    k_idx = np.asarray(k_idx, dtype=np.int64)
    return np.clip(q_idx[:, None] - k_idx[None, :], -l_max, l_max - 1) + l_max


def standard_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None,
                       scale: float | None = None) -> Tensor:
    """softmax(q k^T * scale + mask) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention feature dims disagree: {q.shape} vs {k.shape}")
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.scale(T.matmul(q, T.transpose(k)), scale)
    if mask is not None:
        scores = T.masked_fill(scores, mask)
    return T.matmul(T.softmax(scores), v)


@dataclass
class RelParams:
    """Single-head projection weights for the four-term score (oracle surface)."""

    wq: Tensor
    wk: Tensor
    wqp: Tensor
    wkp: Tensor
    table: Tensor  # (2L, d) relative position rows


def relative_scores(fq: Tensor, fk: Tensor, params: RelParams, terms,
                    l_max: int, q_idx: np.ndarray, k_idx: np.ndarray) -> Tensor:
    """Unscaled pairwise scores, single head.

    score[i,j] = c2c + c2p + p2c + p2p where position rows are selected by
    the clamped distance buckets of (i-j) for query-side and (j-i) for
    key-side lookups.
    """
    if params.table.shape[0] != 2 * l_max:
        raise ShapeError(f"position table has {params.table.shape[0]} rows, expected {2 * l_max}")
    qf = T.matmul(fq, params.wq)
    kf = T.matmul(fk, params.wk)
    qp = T.matmul(params.table, params.wqp)
    kp = T.matmul(params.table, params.wkp)
    bij = bucket_matrix(q_idx, k_idx, l_max)
    bji = bucket_matrix(k_idx, q_idx, l_max).T
    return _term_sum(qf, kf, qp, kp, bij, bji, terms, l_max)


def _term_sum(qf, kf, qp, kp, bij, bji, terms, l_max):
    """Shared score assembly; works for 2-D (single head) and 3-D (H leading)."""
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown attention terms {sorted(unknown)}")
    pieces = []
    if "c2c" in terms:
        pieces.append(T.matmul(qf, T.transpose(kf)))
    if "c2p" in terms:
        pieces.append(T.take_pairwise(T.matmul(qf, T.transpose(kp)), bji))
    if "p2c" in terms:
        tmp = T.take_pairwise(T.matmul(kf, T.transpose(qp)), np.ascontiguousarray(bij.T))
        pieces.append(T.transpose(tmp))
    if "p2p" in terms:
        qpkp = T.matmul(qp, T.transpose(kp))
        flat_shape = qpkp.shape[:-2] + (4 * l_max * l_max,)
        pieces.append(T.take_last(T.reshape(qpkp, flat_shape), bij * (2 * l_max) + bji))
    if not pieces:
        raise ValueError("at least one attention term must be enabled")
    out = pieces[0]
    for p in pieces[1:]:
        out = T.add(out, p)
    return out


class MultiHeadAttention:
    """Multi-head wrapper; optionally carries the relative-position machinery.

    The (2L, d) distance table itself is owned by the caller (one per site,
    shared across layers) and passed per call; the per-layer projections of
    it live here.
    """

    def __init__(self, d_model: int, heads: int, rel: bool, terms, l_max: int,
                 rng: np.random.Generator, dtype=np.float64):
        if d_model % heads:
            raise ShapeError(f"model width {d_model} not divisible by {heads} heads")
        self.d = d_model
        self.h = heads
        self.dh = d_model // heads
        self.rel = rel
        self.terms = tuple(terms)
        self.l_max = l_max
        bound = np.sqrt(3.0 / d_model)  # glorot for square projections
        def proj():
            return T.parameter(rng.uniform(-bound, bound, size=(d_model, d_model)), dtype=dtype)
        self.wq, self.wk, self.wv, self.wo = proj(), proj(), proj(), proj()
        self.wqp = proj() if rel else None
        self.wkp = proj() if rel else None

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}wq": self.wq, f"{prefix}wk": self.wk,
               f"{prefix}wv": self.wv, f"{prefix}wo": self.wo}
        if self.rel:
            out[f"{prefix}wqp"] = self.wqp
            out[f"{prefix}wkp"] = self.wkp
        return out

    def _heads(self, x: Tensor) -> Tensor:
        m = x.shape[0]
        return T.transpose(T.reshape(x, (m, self.h, self.dh)), (1, 0, 2))

    def __call__(self, fq: Tensor, fk: Tensor, fv: Tensor, *,
                 pos_table: Tensor | None = None,
                 q_idx: np.ndarray | None = None, k_idx: np.ndarray | None = None,
                 mask: np.ndarray | None = None,
                 drop_rate: float = 0.0, drop_rng=None,
                 return_weights: bool = False):
        mq, mk = fq.shape[0], fk.shape[0]
        qf = self._heads(T.matmul(fq, self.wq))
        kf = self._heads(T.matmul(fk, self.wk))
        vf = self._heads(T.matmul(fv, self.wv))

        if self.rel:
            if pos_table is None:
                raise ValueError("relative attention needs its position table")
            if q_idx is None:
                q_idx = np.arange(mq)
            if k_idx is None:
                k_idx = np.arange(mk)
            qp = self._heads(T.matmul(pos_table, self.wqp))
            kp = self._heads(T.matmul(pos_table, self.wkp))
            bij = bucket_matrix(q_idx, k_idx, self.l_max)
            bji = bucket_matrix(k_idx, q_idx, self.l_max).T
            scores = _term_sum(qf, kf, qp, kp, bij, bji, self.terms, self.l_max)
            scores = T.scale(scores, 1.0 / np.sqrt(4.0 * self.dh))
        else:
            scores = T.scale(T.matmul(qf, T.transpose(kf)), 1.0 / np.sqrt(self.dh))

        if mask is not None:
            scores = T.masked_fill(scores, mask)
        attn = T.softmax(scores)
        attn = T.dropout(attn, drop_rate, drop_rng)
        out = T.matmul(attn, vf)                        # (H, Mq, dh)
        out = T.reshape(T.transpose(out, (1, 0, 2)), (mq, self.d))
        out = T.matmul(out, self.wo)
        if return_weights:
            return out, attn
        return out


def causal_mask(n: int) -> np.ndarray:
    """True above the diagonal: position i may not see j > i."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def key_padding_mask(mq: int, mk: int, true_len: int) -> np.ndarray:
    """True for key columns past the real sequence end."""
    mask = np.zeros((mq, mk), dtype=bool)
    mask[:, true_len:] = True
    return mask
