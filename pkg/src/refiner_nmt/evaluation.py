"""Corpus-level translation, BLEU reports, speed benchmarking and gate saliency."""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .bleu import bleu as corpus_bleu_score
from .data import ParallelCorpus
from .decoding import Hypothesis, beam_search, greedy_decode
from .model import RefinerNMT
from .vocab import BOS, Vocabulary

DEFAULT_EDGES = (15, 30, 45)


def default_max_len(src_len: int) -> int:
    return 2 * src_len + 10


@dataclass
class TranslationResult:
    hypotheses: list[Hypothesis]
    texts: list[list[str]]
    bleu: float
    refine_ops: int
    steps: int
    seconds: float

    @property
    def refine_rate(self) -> float:
        return 100.0 * self.refine_ops / self.steps if self.steps else 0.0


def translate_corpus(
    model: RefinerNMT,
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    beam_size: int = 1,
    theta: float = 0.5,
    length_norm: float = 1.0,
) -> TranslationResult:
    hyps, texts = [], []
    refines = steps = 0
    t0 = time.perf_counter()
    for src in corpus.sources:
        ids = src_vocab.encode(src)
        max_len = default_max_len(len(ids))
        if beam_size == 1:
            hyp = greedy_decode(model, ids, max_len, theta=theta)
        else:
            hyp = beam_search(model, ids, beam_size, max_len, length_norm, theta=theta)
        hyps.append(hyp)
        texts.append(tgt_vocab.decode(hyp.tokens))
        if hyp.trace is not None:
            refines += hyp.trace.refine_count
            steps += len(hyp.trace)
    seconds = time.perf_counter() - t0
    score = corpus_bleu_score(texts, corpus.targets) if len(corpus) else 0.0
    return TranslationResult(hyps, texts, score, refines, steps, seconds)


def write_translations(path: str | Path, texts: Sequence[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in texts:
            fh.write(" ".join(t) + "\n")


def decoded_token_accuracy(texts: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> float:
    """Percent of reference positions whose token the hypothesis reproduces at the same index."""
    hit = total = 0
    for h, r in zip(texts, refs):
        total += len(r)
        hit += sum(1 for a, b in zip(h, r) if a == b)
    return 100.0 * hit / total if total else 0.0


# -- length buckets -------------------------------------------------------------------


@dataclass
class BucketRow:
    label: str
    lo: int
    hi: int | None
    count: int
    bleu: float


def bucket_index(length: int, edges: Sequence[int]) -> int:
    """Bucket k holds lengths in ``[edges[k-1], edges[k])``; bucket 0 is ``< edges[0]``."""
    k = 0
    while k < len(edges) and length >= edges[k]:
        k += 1
    return k


def bucket_label(k: int, edges: Sequence[int]) -> str:
    if not edges:
        return "all"
    if k == 0:
        return f"<{edges[0]}"
    if k == len(edges):
        return f">={edges[-1]}"
    return f"[{edges[k - 1]},{edges[k]})"


def length_bucket_report(
    sources: Sequence[Sequence[str]],
    hypotheses: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    edges: Sequence[int] = DEFAULT_EDGES,
) -> list[BucketRow]:
    """Per-bucket corpus BLEU by source length; empty buckets are omitted."""
    edges = list(edges)
    if edges != sorted(edges):
        raise ValueError(f"bucket edges must be ascending, got {edges}")
    groups: dict[int, list[int]] = {}
    for i, src in enumerate(sources):
        groups.setdefault(bucket_index(len(src), edges), []).append(i)
    rows = []
    for k in sorted(groups):
        idx = groups[k]
        lo = 0 if k == 0 else edges[k - 1]
        hi = edges[k] if k < len(edges) else None
        score = corpus_bleu_score([hypotheses[i] for i in idx], [references[i] for i in idx])
        rows.append(BucketRow(bucket_label(k, edges), lo, hi, len(idx), score))
    return rows


def write_bucket_report(path: str | Path, rows: Sequence[BucketRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "lo", "hi", "count", "bleu"])
        for r in rows:
            w.writerow([r.label, r.lo, "" if r.hi is None else r.hi, r.count, r.bleu])


# -- speed -----------------------------------------------------------------------------


@dataclass
class SpeedReport:
    words_per_second: float
    refine_rate: float
    steps: int
    seconds: list[float] = field(default_factory=list)

    @property
    def median_seconds(self) -> float:
        return statistics.median(self.seconds)


def speed_benchmark(
    model: RefinerNMT,
    sources: Sequence[Sequence[int]],
    repeats: int = 3,
    theta: float = 0.5,
    warmup: int = 20,
) -> SpeedReport:
    """Greedy-decoding throughput in emitted tokens (EOS included) per second.

    A warm-up pass over the first ``warmup`` sentences is excluded; the reported
    time is the median over ``repeats`` full passes. The refine rate counts
    refines actually executed per emitted token.
    """
    for ids in sources[:warmup]:
        greedy_decode(model, ids, default_max_len(len(ids)), theta=theta)
    times = []
    steps = refines = 0
    for _ in range(max(1, repeats)):
        steps = refines = 0
        t0 = time.perf_counter()
        for ids in sources:
            hyp = greedy_decode(model, ids, default_max_len(len(ids)), theta=theta)
            steps += len(hyp.tokens)
            refines += hyp.trace.refine_count if hyp.trace is not None else 0
        times.append(time.perf_counter() - t0)
    med = statistics.median(times)
    return SpeedReport(steps / med, 100.0 * refines / steps if steps else 0.0, steps, times)


# -- saliency --------------------------------------------------------------------------


def _teacher_inputs(tgt_ids: Sequence[int]) -> np.ndarray:
    return np.array([[BOS] + list(tgt_ids[:-1])], dtype=np.int64)


def saliency_map(model: RefinerNMT, src_ids: Sequence[int], tgt_ids: Sequence[int], theta: float = 0.5) -> np.ndarray:
    """Row i, column j: L1 norm over gate units of d(-log p(y_i)) / d z^i_j.

    Only defined for variants with a gate; the hard-mask gate has one unit.
    """
    if model.mode is None:
        raise ValueError(f"saliency needs a gated variant, got {model.variant!r}")
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    tgt = np.asarray(tgt_ids, dtype=np.int64)
    with T.Graph() as g:
        res = model.forward(src, None, _teacher_inputs(tgt), training=False, theta=theta)
        losses = [T.sum_(-T.log(T.gather(p, tgt[i : i + 1]))) for i, p in enumerate(res.probs)]
    out = np.zeros((len(tgt), src.shape[1]))
    for i, (loss, z) in enumerate(zip(losses, res.gates)):
        if z is None:
            continue
        (gz,) = g.grad(loss, [z])
        out[i] = np.abs(gz[0]).sum(axis=-1)
    return out


def step_losses(model: RefinerNMT, src_ids, tgt_ids, gate_hook=None, theta: float = 0.5) -> np.ndarray:
    """Per-step ``-log p(y_i)`` under teacher forcing, no graph."""
    src = np.asarray(src_ids, dtype=np.int64)[None, :]
    tgt = np.asarray(tgt_ids, dtype=np.int64)
    with T.no_grad():
        res = model.forward(src, None, _teacher_inputs(tgt), training=False, theta=theta, gate_hook=gate_hook)
    return np.array([-np.log(p.data[0, tgt[i]]) for i, p in enumerate(res.probs)])


def write_saliency(prefix: str | Path, matrix: np.ndarray, src_tokens=None, tgt_tokens=None) -> tuple[Path, Path]:
    """Write ``prefix.csv`` and an 8-bit binary graymap ``prefix.pgm`` (white = most salient)."""
    prefix = Path(prefix)
    csv_path, pgm_path = prefix.with_suffix(".csv"), prefix.with_suffix(".pgm")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["target"] + (list(src_tokens) if src_tokens is not None else [f"src{j}" for j in range(matrix.shape[1])]))
        for i, row in enumerate(matrix):
            label = tgt_tokens[i] if tgt_tokens is not None else f"tgt{i}"
            w.writerow([label] + [repr(float(v)) for v in row])
    top = matrix.max()
    pixels = np.zeros(matrix.shape, dtype=np.uint8) if top <= 0 else np.round(255 * matrix / top).astype(np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{matrix.shape[1]} {matrix.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return csv_path, pgm_path


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary graymap")
    width, height = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(height, width)
