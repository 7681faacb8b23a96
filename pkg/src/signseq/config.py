"""Run configuration: one nested mapping drives everything.

Loads YAML, validates keys against the defaults tree, applies dotted
command-line overrides (``training.steps=50``), and builds the typed
sub-configs. The exact mapping is embedded in every artifact file together
with its sha256 digest.
"""

from __future__ import annotations

import copy

import yaml

from .clipconv import ClipConvConfig
from .data import CorpusConfig, canonical_json, config_digest
from .gather import GatherConfig, clip_len
from .model import AttentionConfig, ModelConfig

DEFAULTS: dict = {
    "corpus": {
        "seed": 0,
        "n_gloss": 12,
        "d_in": 32,
        "n_train": 300,
        "n_dev": 50,
        "n_test": 50,
        "min_glosses": 2,
        "max_glosses": 5,
        "min_frames": 12,
        "max_frames": 20,
        "noise": 0.5,
        "rule": "swap_pairs_append_length",
    },
    "model": {
        "d_model": 64,
        "heads": 4,
        "enc_layers": 2,
        "dec_layers": 2,
        "ff_width": None,
        "dropout": 0.1,
        "dtype": "float32",
    },
    "gathering": {
        "variant": "content_aware",
        "l": 16,
        "gamma": 1.0,
    },
    "clipconv": {
        "pe": "rpe",
        "residual": True,
        "layernorm": True,
        "qkv": "kv_aggregated",
        "first_layer_only": False,
    },
    "attention": {
        "max_dist": 32,
        "terms": ["c2c", "c2p", "p2c", "p2p"],
        "rel_sites": ["enc", "dec", "cross"],
    },
    "loss": {
        "lambda_rec": 1.0,
        "lambda_tr": 1.0,
    },
    "training": {
        "seed": 0,
        "steps": 3000,
        "batch_size": 10,
        # toy-scale schedule: the warmup must clear its peak well inside the
        # 3000-step budget or checkpoint averaging spans mid-convergence models
        "peak_lr": 1.0e-3,
        "warmup": 1000,
        "save_every": 100,
        "average_last": 5,
    },
    "decoding": {
        "ctc_mode": "beam",      # greedy | beam
        "ctc_beam": 5,
        "beam": 5,
        "alpha": 1.0,
        "max_len": 16,
        "translate": True,
    },
    "ablate": {
        "steps": 200,
        "eval_split": "dev",
        "groups": {
            "gathering": {
                "content_aware": {"gathering.variant": "content_aware"},
                "centered": {"gathering.variant": "centered"},
                "sparse": {"gathering.variant": "sparse"},
                "none": {"gathering.variant": "none"},
            },
            "clip_position": {
                "rpe": {"clipconv.pe": "rpe"},
                "ape": {"clipconv.pe": "ape"},
                "no_pe": {"clipconv.pe": "none"},
                "no_residual": {"clipconv.residual": False},
                "no_layernorm": {"clipconv.layernorm": False},
            },
            "attention_sites": {
                "ape_baseline": {"attention.rel_sites": []},
                "enc": {"attention.rel_sites": ["enc"]},
                "dec": {"attention.rel_sites": ["dec"]},
                "enc_dec": {"attention.rel_sites": ["enc", "dec"]},
                "cross": {"attention.rel_sites": ["cross"]},
                "all": {"attention.rel_sites": ["enc", "dec", "cross"]},
            },
            "attention_terms": {
                "c2c": {"attention.terms": ["c2c"]},
                "c2c_c2p_p2c": {"attention.terms": ["c2c", "c2p", "p2c"]},
                "all_terms": {"attention.terms": ["c2c", "c2p", "p2c", "p2p"]},
            },
        },
    },
}

# subtrees whose keys are user-defined, not fixed by the schema
_FREE_SUBTREES = {("ablate", "groups")}


class ConfigError(ValueError):
    pass


def _validate(user: dict, defaults: dict, path: tuple = ()):
    for key, val in user.items():
        here = path + (key,)
        if key not in defaults:
            raise ConfigError(f"unknown config key {'.'.join(here)!r}")
        dflt = defaults[key]
        if here in _FREE_SUBTREES:
            continue
        if isinstance(dflt, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {'.'.join(here)!r} must be a mapping")
            _validate(val, dflt, here)


def _merge(base: dict, over: dict):
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(base.get(key), dict):
            _merge(base[key], val)
        else:
            base[key] = copy.deepcopy(val)


def set_dotted(cfg: dict, dotted: str, value):
    """Assign one already-parsed value at a dotted path, validating the key."""
    keys = dotted.strip().split(".")
    node = cfg
    tree = DEFAULTS
    for i, k in enumerate(keys[:-1]):
        if tuple(keys[:i + 1]) not in _FREE_SUBTREES and k not in tree:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node.setdefault(k, {})
        tree = tree.get(k, {}) if isinstance(tree, dict) else {}
    last = keys[-1]
    prefix_free = any(tuple(keys[:n]) in _FREE_SUBTREES for n in range(1, len(keys)))
    if not prefix_free and (not isinstance(tree, dict) or last not in tree):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[last] = value


def apply_override(cfg: dict, spec: str):
    """Apply one dotted override, e.g. training.steps=50 (value parsed as YAML)."""
    if "=" not in spec:
        raise ConfigError(f"override {spec!r} is not of the form key.path=value")
    dotted, _, raw = spec.partition("=")
    set_dotted(cfg, dotted, yaml.safe_load(raw))


class RunConfig:
    def __init__(self, raw: dict):
        self.raw = raw

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            with open(path) as fh:
                user = yaml.safe_load(fh) or {}
            if not isinstance(user, dict):
                raise ConfigError(f"config file {path} must hold a mapping")
            _validate(user, DEFAULTS)
            _merge(cfg, user)
        for spec in overrides:
            apply_override(cfg, spec)
        out = cls(cfg)
        out.model_config()  # fail fast on inconsistent values
        return out

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def digest(self) -> str:
        return config_digest(self.raw)

    def json(self) -> str:
        return canonical_json(self.raw)

    def __getitem__(self, dotted: str):
        node = self.raw
        for k in dotted.split("."):
            node = node[k]
        return node

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(**self.raw["corpus"])

    def model_config(self) -> ModelConfig:
        corpus = self.corpus_config()
        gather = GatherConfig(**self.raw["gathering"])
        clip = ClipConvConfig(**self.raw["clipconv"])
        att = self.raw["attention"]
        attention = AttentionConfig(max_dist=att["max_dist"], terms=tuple(att["terms"]),
                                    rel_sites=tuple(att["rel_sites"]))
        m = self.raw["model"]
        mc = ModelConfig(
            d_in=corpus.d_in,
            d_model=m["d_model"],
            heads=m["heads"],
            enc_layers=m["enc_layers"],
            dec_layers=m["dec_layers"],
            ff_width=m["ff_width"],
            dropout=m["dropout"],
            dtype=m["dtype"],
            n_gloss=corpus.n_gloss,
            n_words=corpus.n_words,
            lambda_rec=self.raw["loss"]["lambda_rec"],
            lambda_tr=self.raw["loss"]["lambda_tr"],
            gather=gather,
            clipconv=clip,
            attention=attention,
        )
        if gather.variant != "none":
            corpus.validate_min_video(clip_len(gather.l_r))
        return mc
