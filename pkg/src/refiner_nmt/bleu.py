"""Case-insensitive corpus BLEU following the multi-bleu.perl convention.

Clipped n-gram counts and hypothesis n-gram totals are summed over the corpus
before taking precisions. The score is zero whenever any order has no matches
(or no n-grams at all), and the brevity penalty is ``exp(1 - r/c)`` when the
hypothesis side is shorter than the reference side.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence


@dataclass
class BleuResult:
    score: float
    precisions: list[float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int
    matches: list[int]
    totals: list[int]


def _tokens(x) -> list[str]:
    toks = x.split() if isinstance(x, str) else list(x)
    return [t.lower() for t in toks]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> BleuResult:
    """BLEU over aligned lists; items are token lists or space-separated strings."""
    if len(references) == 0:
        raise ValueError("bleu: empty reference list")
    if len(hypotheses) != len(references):
        raise ValueError(f"bleu: {len(hypotheses)} hypotheses vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h, r = _tokens(hyp), _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(r, n)
            matches[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if hyp_len == 0:
        return BleuResult(0.0, precisions, 0.0, hyp_len, ref_len, matches, totals)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) == 0.0:
        return BleuResult(0.0, precisions, bp, hyp_len, ref_len, matches, totals)
    score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_n)
    return BleuResult(score, precisions, bp, hyp_len, ref_len, matches, totals)


def bleu(hypotheses: Sequence, references: Sequence, max_n: int = 4) -> float:
    return corpus_bleu(hypotheses, references, max_n).score
