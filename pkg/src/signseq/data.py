"""Synthetic corpus generation plus binary persistence.

Corpus: each gloss id owns a fixed prototype vector; a video is a
concatenation of per-gloss segments (prototype plus Gaussian noise), and the
word-side sentence is a deterministic, invertible reordering of the gloss
sequence (adjacent pairs swapped, a sentence-length word appended) so gloss
order and word order genuinely differ.

File formats (little-endian throughout, crc32 of everything after the magic
in the last 4 bytes):

dataset  := magic "SGSQDATA" | u32 version | u16 len + rng name
            | u32 len + config JSON | u32 n_samples | u32 d_in
            | sample* | u32 crc32
sample   := u32 m | u32 u | u32 n | u32 b
            | f32 features[m*d_in] | i32 glosses[u] | i32 words[n] | i32 bounds[b]

checkpoint := magic "SGSQCKPT" | u32 version | u32 len + header JSON
              | raw tensor payloads in header order | u32 crc32

The checkpoint header lists (name, shape, dtype) per tensor, the training
step, the full run config, and its digest; optimizer moments ride along the
same way so training can resume bit-exactly.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass

import numpy as np

DATA_MAGIC = b"SGSQDATA"
CKPT_MAGIC = b"SGSQCKPT"
FORMAT_VERSION = 1
RNG_NAME = "numpy-pcg64"

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(obj) -> str:
    import hashlib
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()


@dataclass
class CorpusConfig:
    seed: int = 0
    n_gloss: int = 12
    d_in: int = 32
    n_train: int = 300
    n_dev: int = 50
    n_test: int = 50
    min_glosses: int = 2
    max_glosses: int = 5
    min_frames: int = 12
    max_frames: int = 20
    noise: float = 0.5
    rule: str = "swap_pairs_append_length"

    def __post_init__(self):
        if not 1 <= self.min_glosses <= self.max_glosses:
            raise ValueError(f"bad gloss count range [{self.min_glosses}, {self.max_glosses}]")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ValueError(f"bad frames range [{self.min_frames}, {self.max_frames}]")
        if self.rule != "swap_pairs_append_length":
            raise ValueError(f"unknown reordering rule {self.rule!r}")

    @property
    def n_words(self) -> int:
        # pad/bos/eos + one word per gloss + one word per possible length
        return 3 + self.n_gloss + self.max_glosses

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "seed", "n_gloss", "d_in", "n_train", "n_dev", "n_test",
            "min_glosses", "max_glosses", "min_frames", "max_frames", "noise", "rule")}

    def validate_min_video(self, needed_frames: int):
        shortest = self.min_glosses * self.min_frames
        if shortest < needed_frames:
            raise ValueError(
                f"shortest possible video ({shortest} frames) cannot satisfy the "
                f"gathering requirement of {needed_frames} frames")


@dataclass
class Sample:
    features: np.ndarray          # (M, d_in) float32
    glosses: np.ndarray           # (U,) int32, ids in 1..G
    words: np.ndarray             # (N,) int32
    boundaries: np.ndarray        # (U+1,) int32 segment starts plus final M

    @property
    def length(self) -> int:
        return self.features.shape[0]


# -- gloss/word mapping ----------------------------------------------------------

def gloss_word(g: int, cfg: CorpusConfig) -> int:
    return 2 + int(g)


def length_word(u: int, cfg: CorpusConfig) -> int:
    return 2 + cfg.n_gloss + int(u)


def _swap_pairs(seq: list) -> list:
    out = list(seq)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return out


def glosses_to_words(glosses, cfg: CorpusConfig) -> list[int]:
    """Deterministic non-monotonic reordering; a bijection on gloss sequences."""
    glosses = [int(g) for g in glosses]
    if not 1 <= len(glosses) <= cfg.max_glosses:
        raise ValueError(f"gloss count {len(glosses)} outside [1, {cfg.max_glosses}]")
    return [gloss_word(g, cfg) for g in _swap_pairs(glosses)] + [length_word(len(glosses), cfg)]


def words_to_glosses(words, cfg: CorpusConfig) -> list[int]:
    """Inverse of glosses_to_words; rejects ill-formed sentences."""
    words = [int(w) for w in words]
    if not words:
        raise ValueError("empty word sequence")
    u = words[-1] - 2 - cfg.n_gloss
    if u != len(words) - 1 or not 1 <= u <= cfg.max_glosses:
        raise ValueError(f"bad length word {words[-1]} for {len(words) - 1} content words")
    glosses = [w - 2 for w in words[:-1]]
    if any(not 1 <= g <= cfg.n_gloss for g in glosses):
        raise ValueError(f"word ids {words[:-1]} outside the gloss word range")
    return _swap_pairs(glosses)


# -- generation -------------------------------------------------------------------

def gloss_prototypes(cfg: CorpusConfig) -> np.ndarray:
    """(G, d_in) prototype vectors, fixed by the corpus seed alone."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    return rng.normal(0.0, 1.0, size=(cfg.n_gloss, cfg.d_in))


def _make_sample(cfg: CorpusConfig, protos: np.ndarray, rng: np.random.Generator) -> Sample:
    u = int(rng.integers(cfg.min_glosses, cfg.max_glosses + 1))
    glosses = rng.integers(1, cfg.n_gloss + 1, size=u)
    lens = rng.integers(cfg.min_frames, cfg.max_frames + 1, size=u)
    parts = []
    for g, f in zip(glosses, lens):
        seg = protos[g - 1] + cfg.noise * rng.normal(size=(int(f), cfg.d_in))
        parts.append(seg)
    feats = np.concatenate(parts, axis=0).astype(np.float32)
    bounds = np.concatenate(([0], np.cumsum(lens))).astype(np.int32)
    words = np.asarray(glosses_to_words(glosses, cfg), dtype=np.int32)
    return Sample(feats, glosses.astype(np.int32), words, bounds)


def generate_split(cfg: CorpusConfig, split: str) -> list[Sample]:
    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    if split not in sizes:
        raise ValueError(f"unknown split {split!r}")
    split_id = list(sizes).index(split)
    protos = gloss_prototypes(cfg)
    out = []
    for i in range(sizes[split]):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1 + split_id, i]))
        out.append(_make_sample(cfg, protos, rng))
    return out


# -- binary IO helpers --------------------------------------------------------------

def _u32(x: int) -> bytes:
    return int(x).to_bytes(4, "little")


def _u16(x: int) -> bytes:
    return int(x).to_bytes(2, "little")


class _Cursor:
    def __init__(self, buf: bytes, start: int):
        self.buf = buf
        self.pos = start

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ValueError(f"truncated file: needed {n} bytes at byte {self.pos}, "
                             f"file ends at {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "little")

    def array(self, dtype: str, count: int) -> np.ndarray:
        nbytes = np.dtype(dtype).itemsize * count
        return np.frombuffer(self.take(nbytes), dtype=dtype).copy()


def _check_envelope(raw: bytes, magic: bytes, kind: str) -> _Cursor:
    if len(raw) < len(magic) + 8:
        raise ValueError(f"truncated {kind} file: only {len(raw)} bytes")
    if raw[:len(magic)] != magic:
        raise ValueError(f"not a {kind} file (bad magic at byte 0)")
    stored = int.from_bytes(raw[-4:], "little")
    actual = zlib.crc32(raw[len(magic):-4])
    if stored != actual:
        raise ValueError(f"checksum mismatch at byte {len(raw) - 4}: "
                         f"stored {stored:#010x}, computed {actual:#010x}")
    cur = _Cursor(raw[:-4], len(magic))
    version = cur.u32()
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported {kind} format version {version} at byte {len(magic)}")
    return cur


def save_dataset(path, samples: list[Sample], cfg: CorpusConfig, split: str):
    meta = {"corpus": cfg.to_dict(), "split": split}
    blob = canonical_json(meta).encode()
    parts = [_u32(FORMAT_VERSION),
             _u16(len(RNG_NAME)), RNG_NAME.encode(),
             _u32(len(blob)), blob,
             _u32(len(samples)), _u32(cfg.d_in)]
    for s in samples:
        feats = np.ascontiguousarray(s.features, dtype="<f4")
        parts.extend([
            _u32(s.features.shape[0]), _u32(len(s.glosses)),
            _u32(len(s.words)), _u32(len(s.boundaries)),
            feats.tobytes(),
            np.ascontiguousarray(s.glosses, dtype="<i4").tobytes(),
            np.ascontiguousarray(s.words, dtype="<i4").tobytes(),
            np.ascontiguousarray(s.boundaries, dtype="<i4").tobytes(),
        ])
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC + payload + _u32(zlib.crc32(payload)))


def load_dataset(path) -> tuple[list[Sample], dict]:
    with open(path, "rb") as fh:
        raw = fh.read()
    cur = _check_envelope(raw, DATA_MAGIC, "dataset")
    rng_name = cur.take(cur.u16()).decode()
    if rng_name != RNG_NAME:
        raise ValueError(f"dataset generated with unknown rng {rng_name!r}")
    meta = json.loads(cur.take(cur.u32()).decode())
    n, d_in = cur.u32(), cur.u32()
    samples = []
    for _ in range(n):
        m, u, nw, nb = cur.u32(), cur.u32(), cur.u32(), cur.u32()
        feats = cur.array("<f4", m * d_in).reshape(m, d_in)
        glosses = cur.array("<i4", u)
        words = cur.array("<i4", nw)
        bounds = cur.array("<i4", nb)
        samples.append(Sample(feats, glosses, words, bounds))
    if cur.pos != len(cur.buf):
        raise ValueError(f"trailing {len(cur.buf) - cur.pos} bytes at byte {cur.pos}")
    return samples, meta


def save_checkpoint(path, params: dict[str, np.ndarray], step: int, run_config: dict,
                    opt_state: dict | None = None):
    names = list(params)
    entries = [{"name": k, "shape": list(params[k].shape), "dtype": str(params[k].dtype)}
               for k in names]
    header = {
        "format": FORMAT_VERSION,
        "step": int(step),
        "config": run_config,
        "config_digest": config_digest(run_config),
        "params": entries,
        "opt": None,
    }
    buffers = [np.ascontiguousarray(params[k], dtype=_DTYPES[str(params[k].dtype)]).tobytes()
               for k in names]
    if opt_state is not None:
        header["opt"] = {"step": int(opt_state["step"]), "entries": names,
                         "dtype": str(next(iter(opt_state["m"].values())).dtype)}
        dt = _DTYPES[header["opt"]["dtype"]]
        for k in names:
            buffers.append(np.ascontiguousarray(opt_state["m"][k], dtype=dt).tobytes())
            buffers.append(np.ascontiguousarray(opt_state["v"][k], dtype=dt).tobytes())
    blob = canonical_json(header).encode()
    payload = _u32(FORMAT_VERSION) + _u32(len(blob)) + blob + b"".join(buffers)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + payload + _u32(zlib.crc32(payload)))


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    step: int
    config: dict
    config_digest: str
    opt_state: dict | None = None


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    cur = _check_envelope(raw, CKPT_MAGIC, "checkpoint")
    header = json.loads(cur.take(cur.u32()).decode())
    stored = header["config_digest"]
    actual = config_digest(header["config"])
    if stored != actual:
        raise ValueError(f"config digest mismatch: header says {stored}, config hashes to {actual}")
    params = {}
    for e in header["params"]:
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        arr = cur.array(_DTYPES[e["dtype"]], count).reshape(e["shape"]).astype(e["dtype"])
        params[e["name"]] = arr
    opt_state = None
    if header["opt"] is not None:
        dt = header["opt"]["dtype"]
        m, v = {}, {}
        for name in header["opt"]["entries"]:
            shape = params[name].shape
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            m[name] = cur.array(_DTYPES[dt], count).reshape(shape).astype(dt)
            v[name] = cur.array(_DTYPES[dt], count).reshape(shape).astype(dt)
        opt_state = {"step": header["opt"]["step"], "m": m, "v": v}
    if cur.pos != len(cur.buf):
        raise ValueError(f"trailing {len(cur.buf) - cur.pos} bytes at byte {cur.pos}")
    return Checkpoint(params, header["step"], header["config"], stored, opt_state)


def average_checkpoint_files(paths, out_path):
    """Mean the parameters of same-config checkpoints into a new file."""
    from .model import average_parameters
    if not paths:
        raise ValueError("no checkpoints to average")
    cks = [load_checkpoint(p) for p in paths]
    digests = {c.config_digest for c in cks}
    if len(digests) != 1:
        raise ValueError(f"refusing to average checkpoints with different configs: {sorted(digests)}")
    avg = average_parameters([c.params for c in cks])
    step = max(c.step for c in cks)
    save_checkpoint(out_path, avg, step, cks[0].config, opt_state=None)
    return out_path
