"""Recognition and translation quality measures: WER with an edit breakdown,
and corpus BLEU (unsmoothed; an add-one smoothed per-sentence variant exists
strictly as a labeled diagnostic)."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass


@dataclass
class EditCounts:
    sub: int
    dele: int
    ins: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.sub + self.dele + self.ins

    @property
    def wer(self) -> float:
        return self.errors / self.ref_len


def edit_counts(ref, hyp) -> EditCounts:
    """Minimum-edit alignment counts.

    Ties between edit paths are resolved substitution-first, then deletion,
    then insertion, so the breakdown is deterministic.
    """
    ref, hyp = list(ref), list(hyp)
    if not ref:
        raise ValueError("WER needs a nonempty reference")
    nr, nh = len(ref), len(hyp)
    cost = [[0] * (nh + 1) for _ in range(nr + 1)]
    for i in range(1, nr + 1):
        cost[i][0] = i
    for j in range(1, nh + 1):
        cost[0][j] = j
    for i in range(1, nr + 1):
        for j in range(1, nh + 1):
            diag = cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i][j] = min(diag, cost[i - 1][j] + 1, cost[i][j - 1] + 1)
    # trace back with the documented preference order
    i, j, sub, dele, ins = nr, nh, 0, 0, 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i][j] == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            sub += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and cost[i][j] == cost[i - 1][j] + 1:
            dele += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(sub, dele, ins, nr)


def corpus_wer(refs, hyps) -> dict:
    """Pooled error counts over a corpus; del/ins rates reported separately."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    total = EditCounts(0, 0, 0, 0)
    for r, h in zip(refs, hyps):
        c = edit_counts(r, h)
        total.sub += c.sub
        total.dele += c.dele
        total.ins += c.ins
        total.ref_len += c.ref_len
    return {
        "wer": total.wer,
        "sub_rate": total.sub / total.ref_len,
        "del_rate": total.dele / total.ref_len,
        "ins_rate": total.ins / total.ref_len,
        "ref_len": total.ref_len,
    }


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def corpus_bleu(refs, hyps, max_n: int = 4) -> dict:
    """Corpus BLEU-1..max_n with clipped precisions and the brevity penalty.

    Unsmoothed: a zero n-gram precision zeroes every BLEU-k with k >= n.
    """
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    match = [0] * max_n
    total = [0] * max_n
    ref_len = hyp_len = 0
    for r, h in zip(refs, hyps):
        r, h = list(r), list(h)
        ref_len += len(r)
        hyp_len += len(h)
        for n in range(1, max_n + 1):
            hc = _ngrams(h, n)
            rc = _ngrams(r, n)
            match[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
    prec = [m / t if t else 0.0 for m, t in zip(match, total)]
    bp = 1.0 if hyp_len >= ref_len else (math.exp(1.0 - ref_len / hyp_len) if hyp_len else 0.0)
    out = {"bp": bp, "precisions": prec}
    for k in range(1, max_n + 1):
        ps = prec[:k]
        if min(ps) <= 0.0:
            out[f"bleu{k}"] = 0.0
        else:
            out[f"bleu{k}"] = bp * math.exp(sum(math.log(p) for p in ps) / k)
    return out


def sentence_bleu_smoothed(ref, hyp, max_n: int = 4) -> float:
    """Add-one smoothed per-sentence BLEU. Diagnostic only, never a headline score."""
    ref, hyp = list(ref), list(hyp)
    if not hyp:
        return 0.0
    logs = []
    for n in range(1, max_n + 1):
        hc = _ngrams(hyp, n)
        rc = _ngrams(ref, n)
        m = sum(min(c, rc[g]) for g, c in hc.items())
        t = max(len(hyp) - n + 1, 0)
        logs.append(math.log((m + 1.0) / (t + 1.0)))
    bp = 1.0 if len(hyp) >= len(ref) else math.exp(1.0 - len(ref) / len(hyp))
    return bp * math.exp(sum(logs) / max_n)
