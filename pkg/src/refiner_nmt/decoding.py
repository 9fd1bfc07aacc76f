"""Greedy and beam search over any model exposing ``session(src_ids, **opts)``.

A session provides ``initial_state()`` and ``step(state, prev_token) ->
(log_probs, next_state)``; see :class:`refiner_nmt.model.DecoderSession`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .policy import PolicyTrace
from .vocab import BOS, EOS, PAD


@dataclass
class Hypothesis:
    tokens: list[int]  # ends with EOS unless truncated at max length
    logprob: float
    attention: list[np.ndarray] = field(default_factory=list)
    trace: PolicyTrace | None = None

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def words(self) -> list[int]:
        return self.tokens[:-1] if self.finished else list(self.tokens)

    def score(self, length_norm: float = 1.0) -> float:
        return self.logprob / max(len(self.tokens), 1) ** length_norm


def _mask_specials(logp: np.ndarray) -> np.ndarray:
    logp = logp.copy()
    logp[PAD] = -np.inf
    logp[BOS] = -np.inf
    return logp


def _hypothesis(tokens, logprob, state) -> Hypothesis:
    trace = state.trace() if hasattr(state, "trace") else None
    return Hypothesis(list(tokens), float(logprob), [], trace)


def greedy_decode(model, src_ids, max_len: int = 100, **session_opts) -> Hypothesis:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    sess = model.session(src_ids, **session_opts)
    state = sess.initial_state()
    tokens, logprob, attention = [], 0.0, []
    prev = BOS
    for _ in range(max_len):
        logp, state = sess.step(state, prev)
        logp = _mask_specials(logp)
        prev = int(np.argmax(logp))
        tokens.append(prev)
        logprob += float(logp[prev])
        if getattr(state, "alpha", None) is not None:
            attention.append(state.alpha)
        if prev == EOS:
            break
    hyp = _hypothesis(tokens, logprob, state)
    hyp.attention = attention
    return hyp


def beam_search(model, src_ids, beam_size: int = 10, max_len: int = 100, length_norm: float = 1.0, **session_opts) -> Hypothesis:
    """Best completed hypothesis under ``logprob / len**length_norm``.

    Each finished hypothesis shrinks the live beam by one; hypotheses that reach
    ``max_len`` without EOS count as completed.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    sess = model.session(src_ids, **session_opts)
    live = [(0.0, [], sess.initial_state(), [])]
    finished = []
    for t in range(max_len):
        width = beam_size - len(finished)
        cands = []
        for score, toks, state, att in live:
            logp, nstate = sess.step(state, toks[-1] if toks else BOS)
            logp = _mask_specials(logp)
            a = getattr(nstate, "alpha", None)
            for k in np.argsort(-logp, kind="stable")[:width]:
                if np.isfinite(logp[k]):
                    cands.append((score + float(logp[k]), toks + [int(k)], nstate, att + ([a] if a is not None else [])))
        cands.sort(key=lambda c: -c[0])
        live = []
        for cand in cands[:width]:
            if cand[1][-1] == EOS or t == max_len - 1:
                finished.append(cand)
            else:
                live.append(cand)
        if not live:
            break
    best = max(finished, key=lambda c: c[0] / len(c[1]) ** length_norm)
    hyp = _hypothesis(best[1], best[0], best[2])
    hyp.attention = best[3]
    return hyp
