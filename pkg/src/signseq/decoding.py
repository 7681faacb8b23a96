"""Beam search over word sequences with a final length-penalty ranking."""

from __future__ import annotations

import numpy as np

from .model import BOS_ID, EOS_ID, Model
from .tensor import no_grad


def length_penalty(n_tokens: int, alpha: float) -> float:
    """((5 + |Y|) / 6) ** alpha; |Y| counts generated tokens including eos."""
    if not 0.0 <= alpha <= 2.0:
        raise ValueError(f"length penalty exponent must lie in [0, 2], got {alpha}")
    return ((5.0 + n_tokens) / 6.0) ** alpha


def beam_translate_nbest(model: Model, enc_states, enc_len: int | None = None,
                         beam_width: int = 5, alpha: float = 1.0,
                         max_len: int = 32) -> list[tuple[list[int], float]]:
    """Ranked hypotheses as (word ids without bos/eos, penalized log prob).

    Live hypotheses are pruned by raw log probability; everything that ever
    reached eos stays in a finished pool and is ranked at the end by
    logp / length_penalty. Ties break toward shorter, then lexicographically
    smaller sequences, so results are deterministic.
    """
    if beam_width < 1:
        raise ValueError(f"beam width must be >= 1, got {beam_width}")
    finished: list[tuple[tuple[int, ...], float]] = []
    live: list[tuple[tuple[int, ...], float]] = [((BOS_ID,), 0.0)]
    with no_grad():
        for _ in range(max_len):
            if not live:
                break
            cand = []
            for toks, lp in live:
                logp = model.decode(np.asarray(toks), enc_states, enc_len).data[-1]
                top = np.argsort(-logp, kind="stable")[:beam_width]
                for w in top:
                    nxt = toks + (int(w),)
                    score = lp + float(logp[w])
                    if int(w) == EOS_ID:
                        finished.append((nxt, score))
                    else:
                        cand.append((nxt, score))
            cand.sort(key=lambda c: (-c[1], len(c[0]), c[0]))
            live = cand[:beam_width]

    def rank(pool):
        scored = [(list(t[1:-1] if t[-1] == EOS_ID else t[1:]), lp / length_penalty(len(t) - 1, alpha))
                  for t, lp in pool]
        scored.sort(key=lambda c: (-c[1], len(c[0]), c[0]))
        return scored

    return rank(finished) if finished else rank(live)


def beam_translate(model: Model, enc_states, enc_len: int | None = None,
                   beam_width: int = 5, alpha: float = 1.0,
                   max_len: int = 32) -> tuple[list[int], float]:
    """Best hypothesis (word ids, penalized score)."""
    return beam_translate_nbest(model, enc_states, enc_len, beam_width, alpha, max_len)[0]


def greedy_translate(model: Model, enc_states, enc_len: int | None = None,
                     max_len: int = 32) -> list[int]:
    toks, _ = beam_translate(model, enc_states, enc_len, beam_width=1, alpha=0.0, max_len=max_len)
    return toks
