"""Position-aware temporal convolution over gathered clips.

Each anchor's clip is tagged with a learned relative-offset code, pushed
through two valid kernel-3 convolution blocks (layer norm over channels,
then a rectifier), reduced by a single max over the remaining time axis,
and added back onto the anchor frame as a residual. The result replaces
the keys and values of the enclosing attention block; queries stay the
raw frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .gather import ClipTensor, GatherConfig, clip_indices, clip_len, gather_clips
from .tensor import ShapeError, Tensor

PE_MODES = ("rpe", "ape", "none")
QKV_MODES = ("kv_aggregated", "all_aggregated")

KERNEL = 3
BLOCKS = 2
MIN_CLIP = BLOCKS * (KERNEL - 1) + 1  # two valid kernel-3 convs need >= 5 frames


@dataclass
class ClipConvConfig:
    pe: str = "rpe"                 # rpe | ape | none
    residual: bool = True
    layernorm: bool = True
    qkv: str = "kv_aggregated"      # kv_aggregated | all_aggregated
    first_layer_only: bool = False  # restrict to encoder layer 1 (ablation)

    def __post_init__(self):
        if self.pe not in PE_MODES:
            raise ValueError(f"unknown clip position mode {self.pe!r}, expected one of {PE_MODES}")
        if self.qkv not in QKV_MODES:
            raise ValueError(f"unknown qkv mode {self.qkv!r}, expected one of {QKV_MODES}")


def conv_output_lengths(clip: int) -> list[int]:
    """Time-axis lengths through the tower: input, after each conv, after max."""
    lens = [clip]
    for _ in range(BLOCKS):
        lens.append(lens[-1] - (KERNEL - 1))
    if lens[-1] < 1:
        raise ShapeError(f"clip length {clip} too short for {BLOCKS} valid kernel-{KERNEL} convs")
    lens.append(1)
    return lens


class ClipConv:
    """Parameters and forward pass of the clip aggregation tower."""

    def __init__(self, d: int, l: int, cfg: ClipConvConfig, rng: np.random.Generator, dtype=np.float64):
        self.d = d
        self.l = l
        self.cfg = cfg
        bound = np.sqrt(1.0 / (KERNEL * d))  # fan-in uniform
        def conv_w():
            return T.parameter(rng.uniform(-bound, bound, size=(KERNEL, d, d)), dtype=dtype)
        self.w1, self.b1 = conv_w(), T.parameter(np.zeros(d), dtype=dtype)
        self.w2, self.b2 = conv_w(), T.parameter(np.zeros(d), dtype=dtype)
        self.ln1_g, self.ln1_b = T.parameter(np.ones(d), dtype=dtype), T.parameter(np.zeros(d), dtype=dtype)
        self.ln2_g, self.ln2_b = T.parameter(np.ones(d), dtype=dtype), T.parameter(np.zeros(d), dtype=dtype)
        self.pos_table = None
        if cfg.pe == "rpe":
            self.pos_table = T.parameter(rng.normal(0.0, 0.02, size=(2 * l + 1, d)), dtype=dtype)

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
               f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}
        if self.cfg.layernorm:
            out.update({f"{prefix}ln1_g": self.ln1_g, f"{prefix}ln1_b": self.ln1_b,
                        f"{prefix}ln2_g": self.ln2_g, f"{prefix}ln2_b": self.ln2_b})
        if self.pos_table is not None:
            out[f"{prefix}pos_table"] = self.pos_table
        return out

    def add_position(self, clips: ClipTensor) -> Tensor:
        """Tag clip frames with their position code per the configured mode."""
        mode = self.cfg.pe
        if mode == "none":
            return clips.values
        if mode == "rpe":
            off = clips.offsets
            if off.min() < -self.l or off.max() > self.l:
                raise ShapeError(
                    f"clip offsets [{off.min()}, {off.max()}] outside position table range [-{self.l}, {self.l}]")
            code = T.take_rows(self.pos_table, off + self.l)
            return T.add(clips.values, code)
        # ape: fixed sinusoid of the absolute source frame index
        idx = clips.indices
        table = T.sinusoid_table(idx.reshape(-1), self.d, dtype=clips.values.dtype)
        code = Tensor(table.reshape(idx.shape + (self.d,)))
        return T.add(clips.values, code)

    def tower(self, x: Tensor) -> Tensor:
        """(M, C, d) clips -> (M, d) aggregates; conv/norm/relu twice, then max."""
        conv_output_lengths(x.shape[1])  # validates the length budget
        h = x
        for w, b, g, beta in ((self.w1, self.b1, self.ln1_g, self.ln1_b),
                              (self.w2, self.b2, self.ln2_g, self.ln2_b)):
            h = T.conv1d_valid(h, w, b)
            if self.cfg.layernorm:
                h = T.layer_norm(h, g, beta)
            h = T.relu(h)
        return T.max_axis(h, axis=1)

    def __call__(self, f: Tensor, clips: ClipTensor) -> Tensor:
        agg = self.tower(self.add_position(clips))
        return T.add(agg, f) if self.cfg.residual else agg


def attention_inputs(f: Tensor, gather_cfg: GatherConfig, conv: ClipConv | None,
                     length: int | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """(Q, K, V) for one attention block.

    Queries are always the raw input frames (bit-identical object). With
    gathering disabled the whole tower is skipped and K = V = F.
    """
    if gather_cfg.variant == "none":
        return f, f, f
    if conv is None:
        raise ValueError("gathering enabled but no clip convolution parameters supplied")
    if clip_len(gather_cfg.l_r) < MIN_CLIP:
        raise ShapeError(f"clip length {clip_len(gather_cfg.l_r)} below minimum {MIN_CLIP}")
    plan = clip_indices(f.data, gather_cfg, length)
    f_ag = conv(f, gather_clips(f, plan))
    if conv.cfg.qkv == "all_aggregated":
        return f_ag, f_ag, f_ag
    return f, f_ag, f_ag
