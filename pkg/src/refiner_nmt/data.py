"""Synthetic parallel corpora, corpus files and length-bucketed batching.

Tasks:

``copy``              target equals source.
``reverse``           target is the source reversed.
``swap-lexicon``      every source type maps to a fixed target type (seeded bijection).
``ambiguous-lexicon`` like ``swap-lexicon``, except homograph types ``X<k>`` have two
                      translations; the sense is set by a marker token (``M1``/``M2``)
                      placed at a random position. Markers are not translated, so the
                      decoder has to look back at the source to resolve each homograph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import BOS, EOS, PAD, Vocabulary

TASKS = ("copy", "reverse", "swap-lexicon", "ambiguous-lexicon")
MAX_LEN = 50
MARKERS = ("M1", "M2")


class DataError(ValueError):
    pass


@dataclass
class ParallelCorpus:
    pairs: list[tuple[list[str], list[str]]]
    task: str = "custom"
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[list[str]]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[list[str]]:
        return [t for _, t in self.pairs]

    def subset(self, idx: Sequence[int]) -> "ParallelCorpus":
        return ParallelCorpus([self.pairs[i] for i in idx], self.task, self.seed, dict(self.meta))


@dataclass
class Lexicon:
    """The deterministic rule behind a generated corpus, replayable as an oracle."""

    task: str
    vocab_size: int
    seed: int
    content: list[str] = field(default_factory=list)
    homographs: list[str] = field(default_factory=list)
    mapping: dict[str, str] = field(default_factory=dict)
    senses: dict[tuple[str, str], str] = field(default_factory=dict)

    @classmethod
    def build(cls, task: str, vocab_size: int, seed: int) -> "Lexicon":
        if task not in TASKS:
            raise DataError(f"unknown task {task!r}; expected one of {TASKS}")
        rng = np.random.default_rng([seed, 0])
        lex = cls(task, vocab_size, seed)
        if task == "ambiguous-lexicon":
            n_homo = max(2, vocab_size // 6)
            n_content = vocab_size - n_homo - len(MARKERS)
            if n_content < 2:
                raise DataError(f"vocab-size {vocab_size} too small for ambiguous-lexicon")
            lex.homographs = [f"X{k}" for k in range(n_homo)]
            lex.content = [f"w{k}" for k in range(n_content)]
            perm = rng.permutation(n_content)
            lex.mapping = {w: f"t{perm[k]}" for k, w in enumerate(lex.content)}
            for k, x in enumerate(lex.homographs):
                lex.senses[(x, MARKERS[0])] = f"x{k}a"
                lex.senses[(x, MARKERS[1])] = f"x{k}b"
        else:
            if vocab_size < 1:
                raise DataError("vocab-size must be positive")
            lex.content = [f"w{k}" for k in range(vocab_size)]
            if task == "swap-lexicon":
                perm = rng.permutation(vocab_size)
                lex.mapping = {w: f"t{perm[k]}" for k, w in enumerate(lex.content)}
        return lex

    def translate(self, src: Sequence[str]) -> list[str]:
        if self.task == "copy":
            return list(src)
        if self.task == "reverse":
            return list(reversed(src))
        if self.task == "swap-lexicon":
            return [self.mapping[t] for t in src]
        marker = next(t for t in src if t in MARKERS)
        out = []
        for t in src:
            if t in MARKERS:
                continue
            out.append(self.senses[(t, marker)] if t in self.homographs else self.mapping[t])
        return out

    def sample_source(self, length: int, rng: np.random.Generator) -> list[str]:
        if self.task != "ambiguous-lexicon":
            return [self.content[k] for k in rng.integers(0, len(self.content), size=length)]
        body = []
        for _ in range(length - 1):
            if rng.random() < 0.3:
                body.append(self.homographs[rng.integers(len(self.homographs))])
            else:
                body.append(self.content[rng.integers(len(self.content))])
        if not any(t in self.homographs for t in body):
            body[rng.integers(len(body))] = self.homographs[rng.integers(len(self.homographs))]
        marker = MARKERS[rng.integers(2)]
        pos = int(rng.integers(0, length))
        return body[:pos] + [marker] + body[pos:]


def gen_corpus(
    task: str,
    n: int,
    len_range: tuple[int, int] = (5, 20),
    vocab_size: int = 60,
    seed: int = 0,
) -> ParallelCorpus:
    """Generate ``n`` pairs with source lengths uniform in ``len_range`` (inclusive)."""
    lo, hi = len_range
    if not (1 < lo <= hi <= MAX_LEN):
        raise DataError(f"invalid length range {len_range}: need 1 < lo <= hi <= {MAX_LEN}")
    if n < 1:
        raise DataError("n must be at least 1")
    lex = Lexicon.build(task, vocab_size, seed)
    rng = np.random.default_rng([seed, 1])
    pairs = []
    for _ in range(n):
        src = lex.sample_source(int(rng.integers(lo, hi + 1)), rng)
        pairs.append((src, lex.translate(src)))
    meta = {"task": task, "n": n, "len_range": [lo, hi], "vocab_size": vocab_size, "seed": seed}
    return ParallelCorpus(pairs, task, seed, meta)


def split_corpus(corpus: ParallelCorpus, sizes: Sequence[int]) -> list[ParallelCorpus]:
    """Consecutive, disjoint slices of the given sizes."""
    if sum(sizes) > len(corpus):
        raise DataError(f"split sizes {list(sizes)} exceed corpus size {len(corpus)}")
    out, start = [], 0
    for k in sizes:
        out.append(corpus.subset(range(start, start + k)))
        start += k
    return out


# -- files -------------------------------------------------------------------------


def write_corpus(corpus: ParallelCorpus, prefix: str | Path) -> tuple[Path, Path]:
    prefix = Path(prefix)
    src_path, tgt_path = prefix.with_name(prefix.name + ".src"), prefix.with_name(prefix.name + ".tgt")
    with open(src_path, "w", encoding="utf-8") as fs, open(tgt_path, "w", encoding="utf-8") as ft:
        for s, t in corpus.pairs:
            fs.write(" ".join(s) + "\n")
            ft.write(" ".join(t) + "\n")
    return src_path, tgt_path


def read_corpus(prefix: str | Path) -> ParallelCorpus:
    prefix = Path(prefix)
    src_path, tgt_path = prefix.with_name(prefix.name + ".src"), prefix.with_name(prefix.name + ".tgt")
    for p in (src_path, tgt_path):
        if not p.is_file():
            raise DataError(f"corpus file not found: {p}")
    src_lines = src_path.read_text(encoding="utf-8").splitlines()
    tgt_lines = tgt_path.read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise DataError(f"{src_path} has {len(src_lines)} lines but {tgt_path} has {len(tgt_lines)}")
    pairs = []
    for k, (s, t) in enumerate(zip(src_lines, tgt_lines), 1):
        s_toks, t_toks = s.split(), t.split()
        if not s_toks or not t_toks:
            raise DataError(f"{prefix}: empty side on line {k}")
        pairs.append((s_toks, t_toks))
    return ParallelCorpus(pairs, task="file")


def write_manifest(path: str | Path, meta: dict) -> None:
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- batching --------------------------------------------------------------------


@dataclass
class Batch:
    src: np.ndarray  # (B, J) int
    tgt_in: np.ndarray  # (B, T) int, BOS-framed
    tgt_out: np.ndarray  # (B, T) int, EOS-framed
    src_len: np.ndarray
    tgt_len: np.ndarray  # includes EOS
    index: np.ndarray  # positions in the source corpus

    @property
    def size(self) -> int:
        return self.src.shape[0]

    @property
    def src_mask(self) -> np.ndarray:
        return (np.arange(self.src.shape[1])[None, :] < self.src_len[:, None]).astype(float)

    @property
    def tgt_mask(self) -> np.ndarray:
        return (np.arange(self.tgt_out.shape[1])[None, :] < self.tgt_len[:, None]).astype(float)


def encode_pairs(corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary):
    return [(src_vocab.encode(s), tgt_vocab.encode(t)) for s, t in corpus.pairs]


def collate(pairs: Sequence[tuple[list[int], list[int]]], index: Sequence[int]) -> Batch:
    B = len(pairs)
    J = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs) + 1
    src = np.full((B, J), PAD, dtype=np.int64)
    tgt_in = np.full((B, T), PAD, dtype=np.int64)
    tgt_out = np.full((B, T), PAD, dtype=np.int64)
    for b, (s, t) in enumerate(pairs):
        src[b, : len(s)] = s
        tgt_in[b, : len(t) + 1] = [BOS] + t
        tgt_out[b, : len(t) + 1] = t + [EOS]
    return Batch(
        src,
        tgt_in,
        tgt_out,
        np.array([len(s) for s, _ in pairs]),
        np.array([len(t) + 1 for _, t in pairs]),
        np.asarray(index),
    )


def make_batches(
    corpus: ParallelCorpus,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    batch_size: int,
    shuffle_seed: int | None = None,
) -> list[Batch]:
    """Group sentences of similar source length, then shuffle batch order.

    With ``shuffle_seed=None`` the order is deterministic (sorted by length).
    """
    if batch_size < 1:
        raise DataError("batch size must be at least 1")
    encoded = encode_pairs(corpus, src_vocab, tgt_vocab)
    order = np.arange(len(encoded))
    rng = np.random.default_rng(shuffle_seed) if shuffle_seed is not None else None
    if rng is not None:
        order = rng.permutation(order)
    lengths = np.array([len(encoded[i][0]) for i in order])
    order = order[np.argsort(lengths, kind="stable")]
    chunks = [order[k : k + batch_size] for k in range(0, len(order), batch_size)]
    if rng is not None:
        chunks = [chunks[k] for k in rng.permutation(len(chunks))]
    return [collate([encoded[i] for i in idx], idx) for idx in chunks]
