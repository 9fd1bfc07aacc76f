"""Token/id maps with reserved ids and their tab-separated file form."""

from __future__ import annotations

from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ("<pad>", "<unk>", "<s>", "</s>")


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = (), counts: Sequence[int] | None = None):
        self.itos: list[str] = list(RESERVED)
        self.counts: list[int] = [0] * len(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(RESERVED)}
        for k, tok in enumerate(tokens):
            if tok in self.stoi:
                raise ValueError(f"duplicate token {tok!r}")
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
            self.counts.append(0 if counts is None else int(counts[k]))

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if strip and i == EOS:
                break
            if strip and i in (PAD, BOS):
                continue
            out.append(self.itos[i])
        return out

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, n in zip(self.itos[len(RESERVED) :], self.counts[len(RESERVED) :]):
                fh.write(f"{tok}\t{n}\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                tok, sep, n = line.partition("\t")
                if not sep:
                    raise ValueError(f"{path}:{lineno}: expected 'token<TAB>count'")
                tokens.append(tok)
                counts.append(int(n))
        return cls(tokens, counts)


def build_vocab(sentences: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically; ``max_size`` includes reserved ids."""
    counter = Counter(tok for sent in sentences for tok in sent)
    if not counter:
        raise ValueError("build_vocab: empty corpus")
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))
    ranked = [kv for kv in ranked if kv[0] not in RESERVED][: max(0, max_size - len(RESERVED))]
    return Vocabulary([t for t, _ in ranked], [n for _, n in ranked])
