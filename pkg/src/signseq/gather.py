"""Content-aware neighborhood gathering.

For every frame t a short clip of source frames is selected before the
temporal convolution: a banded, diagonal-free softmax over frame-to-frame
similarities splits the clip budget between the past and the future, and the
chosen window is clipped back into the sequence so each clip keeps exactly
``clip_len(l_r)`` consecutive frames containing its anchor.

Index selection is integer-valued and deliberately outside the autodiff
graph; gradients flow through the gathered frame values only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, take_rows

VARIANTS = ("content_aware", "centered", "sparse", "none")


@dataclass
class GatherConfig:
    variant: str = "content_aware"
    l: int = 16          # half width of the candidate band
    gamma: float = 1.0   # budget multiplier; l_r = round(gamma * l)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown gathering variant {self.variant!r}, expected one of {VARIANTS}")
        if self.l < 1:
            raise ValueError(f"band half width must be positive, got {self.l}")
        if self.gamma <= 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")

    @property
    def l_r(self) -> int:
        return round_half_up(self.gamma * self.l)

    @property
    def table_radius(self) -> int:
        """Largest |offset| any clip slot can carry.

        Boundary deficits shift budget to one side, so a window can reach
        l_r past its anchor even though candidates are scored inside the
        +-l band; gamma > 1 makes l_r exceed l.
        """
        return max(self.l, self.l_r)


def round_half_up(x: float) -> int:
    """Deterministic rounding with .5 going up, independent of FP banker's mode."""
    return int(np.floor(x + 0.5))


def clip_len(l_r: int) -> int:
    """Frames per clip: the budget plus the anchor itself."""
    return l_r + 1


def similarity_matrix(f: np.ndarray) -> np.ndarray:
    """Scaled dot-product frame similarity, s = F F^T / sqrt(d)."""
    f = np.asarray(f)
    if f.ndim != 2:
        raise ShapeError(f"similarity_matrix expects (M, d), got {f.shape}")
    return (f @ f.T) / np.sqrt(f.shape[1])


def band_mask(m: int, l: int) -> np.ndarray:
    """True where |i-j| <= l and i != j."""
    idx = np.arange(m)
    diff = idx[None, :] - idx[:, None]
    return (np.abs(diff) <= l) & (diff != 0)


def neighbor_distribution(s: np.ndarray, l: int) -> np.ndarray:
    """Row-wise softmax of s restricted to the off-diagonal band.

    Masked entries are exactly zero; every row sums to one. A one-frame
    sequence has no neighbors and is rejected.
    """
    s = np.asarray(s, dtype=np.float64)
    m = s.shape[0]
    if m < 2:
        raise ValueError(f"neighbor distribution undefined for M={m} (no neighbors)")
    keep = band_mask(m, l)
    z = np.where(keep, s, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def real_split(d_row: np.ndarray, t: int, l: int, gamma: float) -> tuple[float, float]:
    """Real-valued past/future budget split before any rounding."""
    before = float(d_row[:t].sum())
    after = float(d_row[t + 1:].sum())
    return gamma * l * before, gamma * l * after


def region_bounds(d_row: np.ndarray, t: int, l: int, gamma: float, m: int) -> tuple[int, int]:
    """Integer reach (l_minus, l_plus) of frame t's clip.

    The budget l_r = round(gamma*l) is fixed first; the past share is the
    rounded mass before t, clamped to [0, l_r]; the future side gets the
    rest. A deficit at either sequence boundary is shifted to the other side
    so the window [t-l_minus, t+l_plus] stays inside [0, m-1] at full size.
    """
    l_r = round_half_up(gamma * l)
    if m < clip_len(l_r):
        raise ValueError(f"sequence length {m} shorter than clip length {clip_len(l_r)}")
    raw_minus, _ = real_split(d_row, t, l, gamma)
    l_minus = min(max(round_half_up(raw_minus), 0), l_r)
    l_plus = l_r - l_minus
    return _fit_bounds(l_minus, l_plus, t, m)


def _fit_bounds(l_minus: int, l_plus: int, t: int, m: int) -> tuple[int, int]:
    if t - l_minus < 0:
        deficit = l_minus - t
        l_minus, l_plus = t, l_plus + deficit
    if t + l_plus > m - 1:
        excess = t + l_plus - (m - 1)
        l_plus -= excess
        l_minus += excess
    if t - l_minus < 0 or t + l_plus > m - 1:
        raise AssertionError(f"bounds do not fit: t={t}, m={m}, ({l_minus}, {l_plus})")
    return l_minus, l_plus


@dataclass
class ClipPlan:
    """Integer gather geometry for one sequence (no gradients)."""

    indices: np.ndarray           # (M, C) source frame per clip slot
    offsets: np.ndarray           # (M, C) relative position, indices - anchor
    l_r: int
    variant: str
    bounds: np.ndarray | None = None       # (L_eff, 2) for content_aware/centered
    dist: np.ndarray | None = field(default=None, repr=False)
    sim: np.ndarray | None = field(default=None, repr=False)


@dataclass
class ClipTensor:
    """Gathered clip values plus their integer geometry."""

    values: Tensor                # (M, C, d)
    offsets: np.ndarray           # (M, C)
    indices: np.ndarray           # (M, C)


def clip_indices(f_values: np.ndarray, cfg: GatherConfig, length: int | None = None) -> ClipPlan:
    """Select clip source indices for every anchor under the configured variant.

    `length` marks the true frame count when `f_values` carries padding;
    padded anchors get degenerate self-clips (their outputs are masked out
    downstream, and this keeps offsets inside the position table).
    """
    f_values = np.asarray(f_values)
    m_full = f_values.shape[0]
    m = m_full if length is None else int(length)
    if not 1 <= m <= m_full:
        raise ValueError(f"true length {m} outside [1, {m_full}]")

    if cfg.variant == "none":
        idx = np.arange(m_full, dtype=np.int64)[:, None]
        return ClipPlan(idx, np.zeros_like(idx), cfg.l_r, cfg.variant)

    l_r = cfg.l_r
    c = clip_len(l_r)
    if m < c:
        raise ValueError(f"sequence length {m} shorter than clip length {c}")

    sim = similarity_matrix(f_values[:m])
    dist = neighbor_distribution(sim, cfg.l) if cfg.variant in ("content_aware", "sparse") else None

    indices = np.empty((m_full, c), dtype=np.int64)
    bounds = np.empty((m, 2), dtype=np.int64)
    for t in range(m):
        if cfg.variant == "content_aware":
            lm, lp = region_bounds(dist[t], t, cfg.l, cfg.gamma, m)
            row = np.arange(t - lm, t + lp + 1)
        elif cfg.variant == "centered":
            lm, lp = _fit_bounds(l_r // 2, l_r - l_r // 2, t, m)
            row = np.arange(t - lm, t + lp + 1)
        else:  # sparse: top-l_r scoring positions plus the anchor
            # candidates live within table_radius; beyond the +-l band the
            # distribution is exactly zero, so those fill in index order and
            # only matter when a sequence edge starves the band
            r = cfg.table_radius
            lo, hi = max(0, t - r), min(t + r, m - 1)
            cand = np.concatenate([np.arange(lo, t), np.arange(t + 1, hi + 1)])
            if cand.size < l_r:
                raise AssertionError(f"candidate pool {cand.size} < budget {l_r} at t={t}, m={m}")
            order = np.lexsort((cand, -dist[t, cand]))
            row = np.sort(np.concatenate([cand[order[:l_r]], [t]]))
            lm, lp = t - row[0], row[-1] - t
        indices[t] = row
        bounds[t] = (lm, lp)
    # padded anchors: degenerate self-clips, discarded by downstream masks
    for t in range(m, m_full):
        indices[t] = t
    offsets = indices - np.arange(m_full, dtype=np.int64)[:, None]
    return ClipPlan(indices, offsets, l_r, cfg.variant, bounds, dist, sim)


def gather_clips(f: Tensor, plan: ClipPlan) -> ClipTensor:
    """Pull the planned frame rows out of F with gradient scatter on backward."""
    if plan.indices.max(initial=-1) >= f.shape[0]:
        raise ShapeError(f"clip plan indexes up to {plan.indices.max()} but F has {f.shape[0]} rows")
    return ClipTensor(take_rows(f, plan.indices), plan.offsets, plan.indices)
