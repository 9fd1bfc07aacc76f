"""When-to-refine policy trained with the straight-through Gumbel-Softmax estimator.

Actions are ordered ``[REUSE, REFINE]``. The decision computed after step ``i``
is consumed at step ``i + 1``; the first step always refines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .seq2seq import ParamStore
from .tensor import Tensor

REUSE, REFINE = 0, 1
ACTIONS = ("REUSE", "REFINE")
GUMBEL_EPS = 1e-12


def add_policy_params(store: ParamStore, d_in: int, d_m: int) -> None:
    store.weight("pol.W1", (d_in, d_m))
    store.bias("pol.b1", (d_m,))
    store.weight("pol.W2", (d_m, 2))
    store.bias("pol.b2", (2,))


def policy_param_count(d_in: int, d_m: int) -> int:
    return d_in * d_m + d_m + 2 * d_m + 2


def policy_state(store: ParamStore, s: Tensor, y_emb: Tensor, context: Tensor) -> Tensor:
    return T.tanh(T.concat([s, y_emb, context]) @ store["pol.W1"] + store["pol.b1"])


def policy_logits(store: ParamStore, m: Tensor) -> tuple[Tensor, Tensor]:
    """Unnormalized scores ``o`` and action probabilities ``softmax(o)``."""
    o = m @ store["pol.W2"] + store["pol.b2"]
    return o, T.softmax(o)


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, shape=(2,)) -> np.ndarray:
    return gumbel_from_uniform(rng.random(shape))


def gumbel_softmax(logits, noise, tau: float) -> Tensor:
    """Relaxed one-hot sample ``softmax((logits + noise) / tau)``; differentiable in ``logits``."""
    if not tau > 0:
        raise ValueError(f"gumbel_softmax: temperature must be positive, got {tau}")
    return T.softmax((T.as_tensor(logits) + noise) * (1.0 / tau))


def st_discretize(relaxed) -> Tensor:
    """One-hot at the argmax (lowest index wins ties); gradients pass to ``relaxed`` unchanged."""
    return T.straight_through(relaxed)


def mix_states(
    onehot,
    prev: Tensor,
    fresh: Callable[[np.ndarray | None], Tensor],
    eager: bool = True,
) -> Tensor:
    """``onehot[REUSE] * prev + onehot[REFINE] * fresh`` per batch row.

    ``fresh(rows)`` builds refined states for the given rows (all rows for
    ``None``). With ``eager`` both branches are built so gradients reach both;
    otherwise ``fresh`` only runs for rows whose action is REFINE.
    """
    B = prev.shape[0]
    if eager:
        reuse, refine = T.split(onehot, (1, 1))
        return T.reshape(reuse, (B, 1, 1)) * prev + T.reshape(refine, (B, 1, 1)) * fresh(None)
    a = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot)
    rows = np.flatnonzero(a[:, REFINE] == 1.0)
    if rows.size == 0:
        return prev
    if rows.size == B:
        return fresh(None)
    out = prev.data.copy()
    out[rows] = fresh(rows).data
    return Tensor(out)


def refine_penalty(flags, alpha: float, mask: np.ndarray | None = None) -> Tensor:
    """``alpha * (#REFINE steps) / I`` per sentence, averaged over the batch.

    ``flags`` holds the REFINE indicator per step, shape ``(I,)`` or ``(B, I)``;
    ``mask`` marks real (non-padding) steps.
    """
    flags = T.as_tensor(flags)
    if flags.ndim == 1:
        flags = T.reshape(flags, (1, -1))
        mask = None if mask is None else np.reshape(mask, (1, -1))
    if mask is None:
        mask = np.ones(flags.shape)
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise ValueError("refine_penalty: every sequence needs at least one step")
    per_sentence = T.sum_(flags * mask, axis=1) * (alpha / lengths)
    return T.mean(per_sentence)


def decide(pi: np.ndarray, theta: float = 0.5) -> np.ndarray:
    """Inference rule: REFINE iff its probability exceeds ``theta`` (ties go to REUSE)."""
    return (np.asarray(pi)[..., REFINE] > theta).astype(np.int64)


def one_hot(actions: np.ndarray) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros(actions.shape + (2,))
    np.put_along_axis(out, actions[..., None], 1.0, axis=-1)
    return out


def tau_at(step: int, total_steps: int, start: float = 1.0, floor: float = 0.5) -> float:
    """Exponential decay from ``start`` reaching ``floor`` at ``total_steps``, then flat."""
    if total_steps <= 0 or start <= floor:
        return max(start, floor)
    rate = math.log(start / floor) / total_steps
    return max(floor, start * math.exp(-rate * step))


@dataclass
class PolicyTrace:
    """Per-step record for one sentence. Row ``i`` describes the action taken at step ``i``
    (decided after step ``i - 1``); row 0 is the forced first REFINE and carries NaNs."""

    actions: list[int] = field(default_factory=list)
    pi: list[np.ndarray] = field(default_factory=list)
    logits: list[np.ndarray] = field(default_factory=list)
    noise: list[np.ndarray] = field(default_factory=list)
    relaxed: list[np.ndarray] = field(default_factory=list)
    onehot: list[np.ndarray] = field(default_factory=list)
    tau: list[float] = field(default_factory=list)

    def append(self, action: int, pi=None, logits=None, noise=None, relaxed=None, tau=float("nan")) -> None:
        nan2 = np.full(2, np.nan)
        self.actions.append(int(action))
        self.pi.append(nan2 if pi is None else np.asarray(pi, dtype=float))
        self.logits.append(nan2 if logits is None else np.asarray(logits, dtype=float))
        self.noise.append(nan2 if noise is None else np.asarray(noise, dtype=float))
        self.relaxed.append(nan2 if relaxed is None else np.asarray(relaxed, dtype=float))
        self.onehot.append(one_hot(np.int64(action)))
        self.tau.append(float(tau))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def refine_count(self) -> int:
        return int(sum(self.actions))

    @property
    def refine_rate(self) -> float:
        return 100.0 * self.refine_count / len(self.actions) if self.actions else 0.0

    def truncate(self, n: int) -> "PolicyTrace":
        return PolicyTrace(*(getattr(self, f)[:n] for f in ("actions", "pi", "logits", "noise", "relaxed", "onehot", "tau")))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "pi_reuse", "pi_refine", "action", "tau"])
            for i, (a, p, t) in enumerate(zip(self.actions, self.pi, self.tau), 1):
                pr = "" if np.isnan(p[0]) else repr(float(p[0]))
                pf = "" if np.isnan(p[1]) else repr(float(p[1]))
                w.writerow([i, pr, pf, ACTIONS[a], "" if math.isnan(t) else repr(t)])


def read_trace_csv(path: str | Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
