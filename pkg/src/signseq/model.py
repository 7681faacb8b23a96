"""Joint recognition/translation model.

A shared encoder over frame features feeds two heads: per-frame gloss log
scores trained with CTC, and an autoregressive word decoder trained with
cross entropy. Encoder self-attention blocks replace their keys and values
with clip-convolution aggregates; all attention sites can run either the
disentangled relative-position scores or a sinusoidal absolute baseline.
Blocks are pre-norm throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import SITES, MultiHeadAttention, causal_mask, key_padding_mask
from .clipconv import ClipConv, ClipConvConfig, attention_inputs
from .ctc import ctc_loss
from .gather import GatherConfig
from .tensor import Tensor

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


@dataclass
class AttentionConfig:
    max_dist: int = 32                                   # clamp L; table has 2L rows
    terms: tuple = ("c2c", "c2p", "p2c", "p2p")
    rel_sites: tuple = ("enc", "dec", "cross")           # empty -> sinusoidal absolute PE

    def __post_init__(self):
        self.terms = tuple(self.terms)
        self.rel_sites = tuple(self.rel_sites)
        bad = set(self.rel_sites) - set(SITES)
        if bad:
            raise ValueError(f"unknown attention sites {sorted(bad)}, expected subset of {SITES}")


@dataclass
class ModelConfig:
    d_in: int = 32
    d_model: int = 64
    heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ff_width: int | None = None          # defaults to 4 * d_model
    dropout: float = 0.1
    dtype: str = "float32"
    n_gloss: int = 12                    # gloss vocabulary, ids 1..n_gloss (0 is blank)
    n_words: int = 20                    # word vocabulary incl. pad/bos/eos
    lambda_rec: float = 1.0
    lambda_tr: float = 1.0
    gather: GatherConfig = field(default_factory=GatherConfig)
    clipconv: ClipConvConfig = field(default_factory=ClipConvConfig)
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if self.ff_width is None:
            self.ff_width = 4 * self.d_model
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64


def _glorot(rng, shape, dtype):
    bound = np.sqrt(6.0 / (shape[0] + shape[1]))
    return T.parameter(rng.uniform(-bound, bound, size=shape), dtype=dtype)


class _FeedForward:
    def __init__(self, d, width, rng, dtype):
        self.w1 = _glorot(rng, (d, width), dtype)
        self.b1 = T.parameter(np.zeros(width), dtype=dtype)
        self.w2 = _glorot(rng, (width, d), dtype)
        self.b2 = T.parameter(np.zeros(d), dtype=dtype)

    def named_parameters(self, prefix):
        return {f"{prefix}w1": self.w1, f"{prefix}b1": self.b1,
                f"{prefix}w2": self.w2, f"{prefix}b2": self.b2}

    def __call__(self, x):
        h = T.relu(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


class _Norm:
    def __init__(self, d, dtype):
        self.g = T.parameter(np.ones(d), dtype=dtype)
        self.b = T.parameter(np.zeros(d), dtype=dtype)

    def named_parameters(self, prefix):
        return {f"{prefix}g": self.g, f"{prefix}b": self.b}

    def __call__(self, x):
        return T.layer_norm(x, self.g, self.b)


class _EncoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype, with_clips: bool):
        rel = "enc" in cfg.attention.rel_sites
        self.ln1 = _Norm(cfg.d_model, dtype)
        self.clip = None
        if with_clips and cfg.gather.variant != "none":
            self.clip = ClipConv(cfg.d_model, cfg.gather.table_radius, cfg.clipconv, rng, dtype)
        self.mha = MultiHeadAttention(cfg.d_model, cfg.heads, rel, cfg.attention.terms,
                                      cfg.attention.max_dist, rng, dtype)
        self.ln2 = _Norm(cfg.d_model, dtype)
        self.ff = _FeedForward(cfg.d_model, cfg.ff_width, rng, dtype)

    def named_parameters(self, prefix):
        out = self.ln1.named_parameters(f"{prefix}ln1_")
        if self.clip is not None:
            out.update(self.clip.named_parameters(f"{prefix}clip_"))
        out.update(self.mha.named_parameters(f"{prefix}attn_"))
        out.update(self.ln2.named_parameters(f"{prefix}ln2_"))
        out.update(self.ff.named_parameters(f"{prefix}ff_"))
        return out


class _DecoderLayer:
    def __init__(self, cfg: ModelConfig, rng, dtype):
        self.ln1 = _Norm(cfg.d_model, dtype)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, "dec" in cfg.attention.rel_sites,
                                            cfg.attention.terms, cfg.attention.max_dist, rng, dtype)
        self.ln2 = _Norm(cfg.d_model, dtype)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, "cross" in cfg.attention.rel_sites,
                                             cfg.attention.terms, cfg.attention.max_dist, rng, dtype)
        self.ln3 = _Norm(cfg.d_model, dtype)
        self.ff = _FeedForward(cfg.d_model, cfg.ff_width, rng, dtype)

    def named_parameters(self, prefix):
        out = self.ln1.named_parameters(f"{prefix}ln1_")
        out.update(self.self_attn.named_parameters(f"{prefix}self_"))
        out.update(self.ln2.named_parameters(f"{prefix}ln2_"))
        out.update(self.cross_attn.named_parameters(f"{prefix}cross_"))
        out.update(self.ln3.named_parameters(f"{prefix}ln3_"))
        out.update(self.ff.named_parameters(f"{prefix}ff_"))
        return out


class Model:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        dtype = cfg.np_dtype
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        rel = cfg.attention.rel_sites

        self.in_proj = _glorot(rng, (cfg.d_in, d), dtype)
        self.in_bias = T.parameter(np.zeros(d), dtype=dtype)
        self.enc_layers = []
        for i in range(cfg.enc_layers):
            with_clips = (i == 0) or not cfg.clipconv.first_layer_only
            self.enc_layers.append(_EncoderLayer(cfg, rng, dtype, with_clips))
        self.enc_norm = _Norm(d, dtype)
        self.gloss_w = _glorot(rng, (d, cfg.n_gloss + 1), dtype)
        self.gloss_b = T.parameter(np.zeros(cfg.n_gloss + 1), dtype=dtype)

        tbl = 2 * cfg.attention.max_dist
        self.pos_enc = T.parameter(rng.normal(0.0, 0.02, (tbl, d)), dtype=dtype) if "enc" in rel else None
        self.word_emb = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (cfg.n_words, d)), dtype=dtype)
        self.dec_layers = [_DecoderLayer(cfg, rng, dtype) for _ in range(cfg.dec_layers)]
        self.pos_dec = T.parameter(rng.normal(0.0, 0.02, (tbl, d)), dtype=dtype) if "dec" in rel else None
        self.pos_cross = T.parameter(rng.normal(0.0, 0.02, (tbl, d)), dtype=dtype) if "cross" in rel else None
        self.dec_norm = _Norm(d, dtype)
        self.out_w = _glorot(rng, (d, cfg.n_words), dtype)
        self.out_b = T.parameter(np.zeros(cfg.n_words), dtype=dtype)

        self.drop_rng = None  # set by the trainer; None keeps dropout off

    # -- parameters ------------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {"in_proj": self.in_proj, "in_bias": self.in_bias}
        for i, layer in enumerate(self.enc_layers):
            out.update(layer.named_parameters(f"enc{i}_"))
        out.update(self.enc_norm.named_parameters("enc_norm_"))
        out.update({"gloss_w": self.gloss_w, "gloss_b": self.gloss_b})
        if self.pos_enc is not None:
            out["pos_enc"] = self.pos_enc
        out["word_emb"] = self.word_emb
        for i, layer in enumerate(self.dec_layers):
            out.update(layer.named_parameters(f"dec{i}_"))
        if self.pos_dec is not None:
            out["pos_dec"] = self.pos_dec
        if self.pos_cross is not None:
            out["pos_cross"] = self.pos_cross
        out.update(self.dec_norm.named_parameters("dec_norm_"))
        out.update({"out_w": self.out_w, "out_b": self.out_b})
        return out

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.named_parameters()
        missing = set(params) ^ set(values)
        if missing:
            raise ValueError(f"parameter names do not match: {sorted(missing)}")
        for name, p in params.items():
            arr = np.asarray(values[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()

    # -- forward ----------------------------------------------------------------
    def _drop(self, x: Tensor, train: bool) -> Tensor:
        if not train or self.cfg.dropout <= 0.0:
            return x
        return T.dropout(x, self.cfg.dropout, self.drop_rng)

    def encode(self, features: np.ndarray, length: int | None = None, train: bool = False):
        """Run the encoder. Returns (states (M, d), gloss log scores (M, G+1)).

        `length` marks the true frame count when `features` carries padding;
        real frames then give zero attention weight to the padded tail.
        """
        cfg = self.cfg
        feats = np.asarray(features, dtype=cfg.np_dtype)
        if feats.ndim != 2 or feats.shape[1] != cfg.d_in:
            raise T.ShapeError(f"expected features (M, {cfg.d_in}), got {feats.shape}")
        m = feats.shape[0]
        true_len = m if length is None else int(length)
        pad_mask = key_padding_mask(m, m, true_len) if true_len < m else None

        h = T.add(T.matmul(Tensor(feats), self.in_proj), self.in_bias)
        if "enc" not in cfg.attention.rel_sites:
            h = T.add(h, Tensor(T.sinusoid_table(np.arange(m), cfg.d_model, cfg.np_dtype)))
        h = self._drop(h, train)

        for layer in self.enc_layers:
            xn = layer.ln1(h)
            if layer.clip is not None:
                q, k, v = attention_inputs(xn, cfg.gather, layer.clip, true_len)
            else:
                q, k, v = xn, xn, xn
            attn = layer.mha(q, k, v, pos_table=self.pos_enc, mask=pad_mask,
                             drop_rate=cfg.dropout if train else 0.0, drop_rng=self.drop_rng)
            h = T.add(h, self._drop(attn, train))
            h = T.add(h, self._drop(layer.ff(layer.ln2(h)), train))

        states = self.enc_norm(h)
        gloss_logp = T.log_softmax(T.add(T.matmul(states, self.gloss_w), self.gloss_b))
        return states, gloss_logp

    def decode(self, targets_in: np.ndarray, enc_states: Tensor,
               enc_len: int | None = None, train: bool = False) -> Tensor:
        """Teacher-forced decoder pass; returns (N, W) word log probabilities."""
        cfg = self.cfg
        targets_in = np.asarray(targets_in, dtype=np.int64)
        if targets_in.ndim != 1 or targets_in.size == 0:
            raise ValueError(f"decoder needs a nonempty 1-D target prefix, got shape {targets_in.shape}")
        if targets_in[0] != BOS_ID:
            raise ValueError(f"target prefix must start with bos={BOS_ID}, got {targets_in[0]}")
        n = targets_in.shape[0]
        m = enc_states.shape[0]
        enc_len = m if enc_len is None else int(enc_len)

        h = T.scale(T.take_rows(self.word_emb, targets_in), float(np.sqrt(cfg.d_model)))
        if "dec" not in cfg.attention.rel_sites:
            h = T.add(h, Tensor(T.sinusoid_table(np.arange(n), cfg.d_model, cfg.np_dtype)))
        h = self._drop(h, train)

        causal = causal_mask(n)
        cross_mask = key_padding_mask(n, m, enc_len) if enc_len < m else None
        rate = cfg.dropout if train else 0.0
        for layer in self.dec_layers:
            xn = layer.ln1(h)
            sa = layer.self_attn(xn, xn, xn, pos_table=self.pos_dec, mask=causal,
                                 drop_rate=rate, drop_rng=self.drop_rng)
            h = T.add(h, self._drop(sa, train))
            xn = layer.ln2(h)
            ca = layer.cross_attn(xn, enc_states, enc_states, pos_table=self.pos_cross,
                                  mask=cross_mask, q_idx=np.arange(n), k_idx=np.arange(m),
                                  drop_rate=rate, drop_rng=self.drop_rng)
            h = T.add(h, self._drop(ca, train))
            h = T.add(h, self._drop(layer.ff(layer.ln3(h)), train))

        h = self.dec_norm(h)
        return T.log_softmax(T.add(T.matmul(h, self.out_w), self.out_b))

    # -- losses -----------------------------------------------------------------
    def sample_losses(self, features, glosses, words, train: bool = False):
        """Per-sample (ctc_loss Tensor | None, nll_sum Tensor | None, token count)."""
        cfg = self.cfg
        enc, gloss_logp = self.encode(features, train=train)
        rec = ctc_loss(gloss_logp, glosses) if cfg.lambda_rec != 0.0 else None
        tr, count = None, 0
        if cfg.lambda_tr != 0.0:
            words = np.asarray(words, dtype=np.int64)
            logp = self.decode(np.concatenate(([BOS_ID], words)), enc, train=train)
            tr, count = T.nll_sum(logp, np.concatenate((words, [EOS_ID])))
        return rec, tr, count

    def joint_loss(self, batch, train: bool = False):
        """Weighted batch loss: lambda_rec * mean CTC + lambda_tr * per-token CE."""
        cfg = self.cfg
        recs, trs, tokens = [], [], 0
        for sample in batch:
            rec, tr, count = self.sample_losses(sample.features, sample.glosses, sample.words, train)
            if rec is not None:
                recs.append(rec)
            if tr is not None:
                trs.append(tr)
                tokens += count
        total = None
        stats = {}
        if recs:
            rec_mean = _tsum(recs)
            rec_mean = T.scale(rec_mean, 1.0 / len(recs))
            stats["ctc_loss"] = float(rec_mean.data)
            total = T.scale(rec_mean, cfg.lambda_rec)
        if trs:
            ce_mean = T.scale(_tsum(trs), 1.0 / tokens)
            stats["ce_loss"] = float(ce_mean.data)
            part = T.scale(ce_mean, cfg.lambda_tr)
            total = part if total is None else T.add(total, part)
        if total is None:
            raise ValueError("both loss weights are zero; nothing to train")
        stats["total"] = float(total.data)
        return total, stats

    def eval_loss(self, batch) -> dict:
        with T.no_grad():
            _, stats = self.joint_loss(batch, train=False)
        return stats


def _tsum(tensors):
    out = tensors[0]
    for t in tensors[1:]:
        out = T.add(out, t)
    return out


def train_step(model: Model, opt, batch) -> dict:
    """One optimizer update; non-finite losses reject the step and report it."""
    loss, stats = model.joint_loss(batch, train=True)
    if not np.isfinite(stats["total"]):
        stats["rejected"] = True
        stats["lr"] = 0.0
        return stats
    opt.zero_grad()
    loss.backward()
    stats["lr"] = opt.step()
    return stats


def average_parameters(param_sets: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    """Mean of each named parameter; names and shapes must agree exactly."""
    if not param_sets:
        raise ValueError("nothing to average")
    names = list(param_sets[0])
    for ps in param_sets[1:]:
        if list(ps) != names:
            raise ValueError("checkpoint parameter names disagree")
    out = {}
    for name in names:
        shapes = {ps[name].shape for ps in param_sets}
        if len(shapes) != 1:
            raise ValueError(f"shape mismatch for {name}: {sorted(shapes)}")
        acc = np.zeros(param_sets[0][name].shape, dtype=np.float64)
        for ps in param_sets:
            acc += ps[name]
        out[name] = (acc / len(param_sets)).astype(param_sets[0][name].dtype)
    return out
