"""Command line interface.

Exit codes: 0 success, 1 user error (bad flags, bad config, missing or
malformed files), 2 internal invariant failure. Reports are line-delimited
JSON with the full run configuration embedded as the first record and no
timestamps, so identical runs produce byte-identical files.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, apply_override, set_dotted
from .ctc import active_backend, ctc_beam_search, ctc_greedy_decode
from .data import (Sample, average_checkpoint_files, generate_split, load_checkpoint,
                   load_dataset, save_checkpoint, save_dataset)
from .decoding import beam_translate_nbest
from .gradcheck import SUITES, run_suites
from .metrics import corpus_bleu, corpus_wer, sentence_bleu_smoothed
from .model import Model, train_step
from .optim import Adam
from .tensor import no_grad


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_config_args(p):
    p.add_argument("--config", help="YAML config file; defaults apply when omitted")
    p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override one config value (repeatable)")


def _run_config(args) -> RunConfig:
    return RunConfig.load(args.config, args.set)


def _jline(fh, obj):
    fh.write(json.dumps(obj, sort_keys=True) + "\n")


def _load_split(data_dir, split, run_cfg: RunConfig | None = None):
    path = os.path.join(data_dir, f"{split}.bin")
    samples, meta = load_dataset(path)
    if run_cfg is not None and meta["corpus"] != run_cfg.raw["corpus"]:
        raise ConfigError(
            f"dataset {path} was generated under a different corpus config; regenerate it")
    return samples


# -- generate-data ---------------------------------------------------------------

def cmd_generate_data(args) -> int:
    run_cfg = _run_config(args)
    cfg = run_cfg.corpus_config()
    os.makedirs(args.out, exist_ok=True)
    counts = {}
    for split in ("train", "dev", "test"):
        samples = generate_split(cfg, split)
        save_dataset(os.path.join(args.out, f"{split}.bin"), samples, cfg, split)
        counts[split] = len(samples)
    print(json.dumps({"out": args.out, "counts": counts,
                      "corpus_digest": run_cfg.digest()}, sort_keys=True))
    return 0


# -- train -----------------------------------------------------------------------

def _index_stream(n: int, rng):
    while True:
        for i in rng.permutation(n):
            yield int(i)


def run_training(run_cfg: RunConfig, samples: list[Sample], out_dir,
                 steps: int | None = None, quiet: bool = False) -> str:
    """Train a fresh model; returns the path of the checkpoint to evaluate.

    Writes metrics.jsonl (config record first, one record per step) and
    periodic checkpoints to out_dir. When at least `average_last` checkpoints
    exist their parameter average is written as ckpt_avg.bin and returned,
    otherwise the final checkpoint is.
    """
    tr = run_cfg.raw["training"]
    steps = tr["steps"] if steps is None else int(steps)
    model = Model(run_cfg.model_config(), seed=tr["seed"])
    model.drop_rng = np.random.default_rng(np.random.SeedSequence([tr["seed"], 7]))
    order_rng = np.random.default_rng(np.random.SeedSequence([tr["seed"], 11]))
    opt = Adam(model.named_parameters(), peak_lr=tr["peak_lr"], warmup=tr["warmup"])

    os.makedirs(out_dir, exist_ok=True)
    stream = _index_stream(len(samples), order_rng)
    ckpts = []
    run_dict = run_cfg.to_dict()
    with open(os.path.join(out_dir, "metrics.jsonl"), "w") as fh:
        _jline(fh, {"type": "config", "config": run_dict, "digest": run_cfg.digest()})
        report_every = max(1, steps // 10)
        for step in range(1, steps + 1):
            batch = [samples[next(stream)] for _ in range(min(tr["batch_size"], len(samples)))]
            stats = train_step(model, opt, batch)
            rec = {"type": "step", "step": step, "lr": stats["lr"],
                   "total": stats["total"]}
            for key in ("ctc_loss", "ce_loss"):
                if key in stats:
                    rec[key] = stats[key]
            if stats.get("rejected"):
                rec["rejected"] = True
            _jline(fh, rec)
            if not quiet and (step % report_every == 0 or step == steps):
                print(f"step {step}/{steps} total={stats['total']:.4f} lr={stats['lr']:.2e}",
                      file=sys.stderr)
            if step % tr["save_every"] == 0 or step == steps:
                path = os.path.join(out_dir, f"ckpt_{step:06d}.bin")
                if not ckpts or ckpts[-1] != path:
                    params = {k: p.data for k, p in model.named_parameters().items()}
                    save_checkpoint(path, params, step, run_dict)
                    ckpts.append(path)

    k = tr["average_last"]
    if k > 1 and len(ckpts) >= k:
        avg_path = os.path.join(out_dir, "ckpt_avg.bin")
        average_checkpoint_files(ckpts[-k:], avg_path)
        return avg_path
    return ckpts[-1]


def cmd_train(args) -> int:
    run_cfg = _run_config(args)
    samples = _load_split(args.data, "train", run_cfg)
    final = run_training(run_cfg, samples, args.out, quiet=args.quiet)
    print(json.dumps({"out": args.out, "final_checkpoint": final,
                      "digest": run_cfg.digest()}, sort_keys=True))
    return 0


# -- evaluate / decode -----------------------------------------------------------

def _model_from_checkpoint(path, overrides=()):
    ck = load_checkpoint(path)
    cfg = json.loads(json.dumps(ck.config))  # keep the stored config untouched
    for spec in overrides:
        apply_override(cfg, spec)
    run_cfg = RunConfig(cfg)
    model = Model(run_cfg.model_config(), seed=run_cfg.raw["training"]["seed"])
    model.load_parameters(ck.params)
    return model, run_cfg, ck


def _decode_sample(model, run_cfg: RunConfig, sample: Sample):
    """Greedy/beam gloss hypothesis and beam word hypothesis for one sample."""
    dec = run_cfg.raw["decoding"]
    with no_grad():
        enc, gloss_logp = model.encode(sample.features)
    lp = np.asarray(gloss_logp.data, dtype=np.float64)
    if dec["ctc_mode"] == "greedy":
        gloss_hyp = ctc_greedy_decode(lp)
    else:
        gloss_hyp = ctc_beam_search(lp, beam_width=dec["ctc_beam"])
    word_hyp = None
    if dec["translate"]:
        word_hyp, _ = beam_translate_nbest(model, enc, beam_width=dec["beam"],
                                           alpha=dec["alpha"], max_len=dec["max_len"])[0]
    return gloss_hyp, word_hyp


def evaluate_split(model, run_cfg: RunConfig, samples: list[Sample]) -> dict:
    gloss_refs, gloss_hyps, word_refs, word_hyps = [], [], [], []
    for sample in samples:
        gloss_hyp, word_hyp = _decode_sample(model, run_cfg, sample)
        gloss_refs.append([int(g) for g in sample.glosses])
        gloss_hyps.append(gloss_hyp)
        if word_hyp is not None:
            word_refs.append([int(w) for w in sample.words])
            word_hyps.append(word_hyp)
    out = {"recognition": corpus_wer(gloss_refs, gloss_hyps),
           "loss": model.eval_loss(samples),
           "n_samples": len(samples)}
    if word_hyps:
        out["translation"] = corpus_bleu(word_refs, word_hyps)
    return out


def cmd_evaluate(args) -> int:
    model, run_cfg, _ = _model_from_checkpoint(args.ckpt, args.set)
    samples = _load_split(args.data, args.split, run_cfg)
    report = evaluate_split(model, run_cfg, samples)
    with open(args.out, "w") as fh:
        _jline(fh, {"type": "config", "config": run_cfg.to_dict(), "digest": run_cfg.digest()})
        _jline(fh, {"type": "loss", "split": args.split, **report["loss"]})
        _jline(fh, {"type": "recognition", "split": args.split, **report["recognition"]})
        if "translation" in report:
            _jline(fh, {"type": "translation", "split": args.split, **report["translation"]})
    rec = report["recognition"]
    line = f"{args.split}: wer={rec['wer']:.4f}"
    if "translation" in report:
        line += f" bleu4={report['translation']['bleu4']:.4f}"
    print(line)
    return 0


def cmd_decode(args) -> int:
    model, run_cfg, _ = _model_from_checkpoint(args.ckpt, args.set)
    samples = _load_split(args.data, args.split, run_cfg)
    if args.limit is not None:
        samples = samples[:args.limit]
    with open(args.out, "w") as fh:
        _jline(fh, {"type": "config", "config": run_cfg.to_dict(), "digest": run_cfg.digest()})
        for i, sample in enumerate(samples):
            gloss_hyp, word_hyp = _decode_sample(model, run_cfg, sample)
            rec = {"type": "sample", "index": i,
                   "gloss_ref": [int(g) for g in sample.glosses], "gloss_hyp": gloss_hyp}
            if word_hyp is not None:
                ref = [int(w) for w in sample.words]
                rec["word_ref"] = ref
                rec["word_hyp"] = word_hyp
                # add-one smoothed, per-sentence; diagnostic only, not comparable
                # to the corpus score
                rec["sentence_bleu_smoothed"] = sentence_bleu_smoothed(ref, word_hyp)
            _jline(fh, rec)
    print(f"wrote {len(samples)} hypotheses to {args.out}")
    return 0


# -- gradcheck -------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    which = tuple(args.which.split(",")) if args.which else ("all",)
    reports = run_suites(which, seed=args.seed, eps=args.eps, tol=args.tol)
    failed = False
    for name, report in reports:
        status = "PASS" if report.ok else "FAIL"
        failed |= not report.ok
        print(f"{status} {name}: max_err={report.max_err:.3e} tol={args.tol:.1e} "
              f"({len(report.params)} parameters)")
        if not report.ok:
            for pc in report.params:
                if pc.max_err > args.tol or pc.nonfinite:
                    flag = " nonfinite" if pc.nonfinite else ""
                    print(f"  {pc.name}: err={pc.max_err:.3e} at {pc.worst_coord}{flag}")
    print(f"backend: ctc={active_backend()}")
    return 2 if failed else 0


# -- ablate ----------------------------------------------------------------------

def cmd_ablate(args) -> int:
    base = _run_config(args)
    ab = base.raw["ablate"]
    groups = ab["groups"]
    chosen = args.groups.split(",") if args.groups else list(groups)
    unknown = [g for g in chosen if g not in groups]
    if unknown:
        raise ConfigError(f"unknown ablation group(s) {unknown}; have {sorted(groups)}")
    steps = args.steps if args.steps is not None else ab["steps"]
    train_samples = _load_split(args.data, "train", base)
    eval_samples = _load_split(args.data, ab["eval_split"], base)

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for group in chosen:
        for cell, overrides in groups[group].items():
            cfg = base.to_dict()
            for dotted, value in overrides.items():
                set_dotted(cfg, dotted, value)
            run_cfg = RunConfig(cfg)
            run_cfg.model_config()  # revalidate the mutated config
            digest = run_cfg.digest()
            cell_dir = os.path.join(args.out, group, f"{cell}_{digest[:8]}")
            ckpt = run_training(run_cfg, train_samples, cell_dir, steps=steps, quiet=True)
            model, _, _ = _model_from_checkpoint(ckpt)
            report = evaluate_split(model, run_cfg, eval_samples)
            with open(os.path.join(cell_dir, "report.jsonl"), "w") as fh:
                _jline(fh, {"type": "config", "config": run_cfg.to_dict(), "digest": digest})
                _jline(fh, {"type": "loss", "split": ab["eval_split"], **report["loss"]})
                _jline(fh, {"type": "recognition", "split": ab["eval_split"],
                            **report["recognition"]})
                if "translation" in report:
                    _jline(fh, {"type": "translation", "split": ab["eval_split"],
                                **report["translation"]})
            row = {"type": "cell", "group": group, "cell": cell, "digest": digest,
                   "steps": steps, "wer": report["recognition"]["wer"],
                   "total_loss": report["loss"]["total"]}
            if "translation" in report:
                row["bleu4"] = report["translation"]["bleu4"]
            rows.append(row)
            if not args.quiet:
                extra = f" bleu4={row['bleu4']:.4f}" if "bleu4" in row else ""
                print(f"{group}/{cell}: wer={row['wer']:.4f}{extra}", file=sys.stderr)

    with open(os.path.join(args.out, "summary.jsonl"), "w") as fh:
        _jline(fh, {"type": "config", "config": base.to_dict(), "digest": base.digest(),
                    "steps": steps, "groups": chosen})
        for row in rows:
            _jline(fh, row)
    print(json.dumps({"out": args.out, "cells": len(rows)}, sort_keys=True))
    return 0


# -- average-ckpt ----------------------------------------------------------------

def cmd_average_ckpt(args) -> int:
    if len(args.ckpts) < 2:
        raise ConfigError("need at least two checkpoints to average")
    average_checkpoint_files(args.ckpts, args.out)
    print(json.dumps({"out": args.out, "inputs": len(args.ckpts)}, sort_keys=True))
    return 0


# -- wiring ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="signseq", description=__doc__.strip().splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write train/dev/test splits as binary files")
    _add_config_args(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a model and write metrics + checkpoints")
    _add_config_args(t)
    t.add_argument("--data", required=True, help="directory holding split .bin files")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="score a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="dev", choices=("train", "dev", "test"))
    e.add_argument("--out", required=True, help="report path (.jsonl)")
    e.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                   help="override config values from the checkpoint (e.g. decoding.beam=1)")
    e.set_defaults(func=cmd_evaluate)

    d = sub.add_parser("decode", help="write per-sample hypotheses for one split")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="test", choices=("train", "dev", "test"))
    d.add_argument("--out", required=True)
    d.add_argument("--limit", type=int, default=None)
    d.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE")
    d.set_defaults(func=cmd_decode)

    gc = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    gc.add_argument("--which", default=None, help=f"comma list from {SUITES} (default all)")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-5)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and score every cell of the ablation grids")
    _add_config_args(a)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--groups", default=None, help="comma list; default all groups")
    a.add_argument("--steps", type=int, default=None, help="override ablate.steps")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)

    av = sub.add_parser("average-ckpt", help="average model parameters across checkpoints")
    av.add_argument("ckpts", nargs="+", help="checkpoint files, two or more")
    av.add_argument("--out", required=True)
    av.set_defaults(func=cmd_average_ckpt)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"signseq: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        import traceback
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
