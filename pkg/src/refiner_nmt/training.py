"""Losses, optimizer and the training loop shared by every variant."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import policy as pol
from . import tensor as T
from .checkpoint import load_arrays, save_arrays
from .config import TrainConfig
from .data import Batch, ParallelCorpus, make_batches
from .model import RefinerNMT
from .tensor import Tensor
from .vocab import Vocabulary

log = logging.getLogger(__name__)

METRIC_FIELDS = ("epoch", "split", "nll", "token_accuracy", "bleu", "refine_rate", "wall_seconds")


def nll_loss(probs, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean of ``-log p(target)`` over non-padding positions.

    ``probs`` is a ``(B, T, V)`` tensor or a list of ``T`` per-step ``(B, V)`` tensors.
    """
    if isinstance(probs, (list, tuple)):
        probs = T.stack(probs, axis=1)
    targets = np.asarray(targets)
    if probs.ndim == 2:
        probs = T.reshape(probs, (1,) + probs.shape)
        targets = targets.reshape(1, -1)
        mask = None if mask is None else np.reshape(mask, (1, -1))
    if mask is None:
        mask = np.ones(targets.shape)
    picked = T.gather(probs, targets)
    return -T.sum_(T.log(picked) * mask) * (1.0 / mask.sum())


def total_loss(nll: Tensor, penalty: Tensor | None = None) -> Tensor:
    return nll if penalty is None else nll + penalty


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float = 1.0) -> tuple[list[np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return list(grads), norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm


class RMSprop:
    """``acc = rho*acc + (1-rho)*g^2``; ``p -= lr * g / sqrt(acc + eps)``."""

    def __init__(self, lr: float = 5e-4, rho: float = 0.95, eps: float = 1e-6):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.acc: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            acc = self.acc.get(name)
            if acc is None:
                acc = self.acc[name] = np.zeros_like(p.data)
            acc *= self.rho
            acc += (1.0 - self.rho) * g * g
            p.data = p.data - self.lr * g / np.sqrt(acc + self.eps)


def rmsprop_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: RMSprop) -> None:
    state.step(params, grads)


# -- losses on batches ---------------------------------------------------------------


def batch_loss(
    model: RefinerNMT,
    batch: Batch,
    training: bool,
    rng: np.random.Generator | None = None,
    tau: float = 1.0,
    alpha: float = 0.0,
    theta: float = 0.5,
):
    """(total, nll, penalty-or-None, forward result) for one padded batch."""
    res = model.forward(batch.src, batch.src_mask, batch.tgt_in, training=training, rng=rng, tau=tau, theta=theta)
    mask = batch.tgt_mask
    nll = nll_loss(res.probs, batch.tgt_out, mask)
    penalty = None
    if model.conditional and alpha > 0:
        penalty = pol.refine_penalty(T.concat(res.refine_flags), alpha, mask)
    return total_loss(nll, penalty), nll, penalty, res


def token_stats(res, batch: Batch) -> tuple[int, int, int]:
    """(correct argmax predictions, real target tokens, REFINE steps) for a forward result."""
    probs = np.stack([p.data for p in res.probs], axis=1)
    mask = batch.tgt_mask.astype(bool)
    correct = int(((probs.argmax(-1) == batch.tgt_out) & mask).sum())
    refines = int((res.actions.astype(bool) & mask).sum()) if res.actions.size else 0
    return correct, int(mask.sum()), refines


@dataclass
class EvalMetrics:
    nll: float
    token_accuracy: float
    refine_rate: float
    tokens: int


def evaluate_batches(model: RefinerNMT, batches: Sequence[Batch], theta: float = 0.5) -> EvalMetrics:
    """Teacher-forced NLL and token accuracy (percent) with the inference-time policy."""
    tot_nll = 0.0
    correct = tokens = refines = 0
    with T.no_grad():
        for b in batches:
            _, nll, _, res = batch_loss(model, b, training=False, theta=theta)
            c, n, r = token_stats(res, b)
            tot_nll += float(nll.data) * n
            correct += c
            tokens += n
            refines += r
    return EvalMetrics(tot_nll / tokens, 100.0 * correct / tokens, 100.0 * refines / tokens, tokens)


# -- training loop ---------------------------------------------------------------------


@dataclass
class TrainResult:
    metrics: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_accuracy: float = -1.0
    steps: int = 0
    stopped_early: bool = False
    best_params: dict[str, np.ndarray] | None = None


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: ``lr`` through epoch ``decay_after``, then ``lr * lr_decay``."""
    if cfg.decay_after and epoch > cfg.decay_after:
        return cfg.lr * cfg.lr_decay
    return cfg.lr


def _epoch_seed(seed: int, epoch: int, stream: int) -> list[int]:
    return [seed, epoch, stream]


def filter_length(corpus: ParallelCorpus, max_len: int) -> ParallelCorpus:
    keep = [k for k, (s, t) in enumerate(corpus.pairs) if len(s) <= max_len and len(t) <= max_len]
    return corpus if len(keep) == len(corpus) else corpus.subset(keep)


def save_training_state(directory: Path, model: RefinerNMT, opt: RMSprop, state: dict) -> None:
    model.save(directory)
    save_arrays(directory / "optimizer.bin", opt.acc)
    (directory / "train_state.json").write_text(json.dumps(state, indent=2) + "\n", encoding="utf-8")


def train(
    model: RefinerNMT,
    train_corpus: ParallelCorpus,
    dev_corpus: ParallelCorpus | None,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume: bool = False,
    max_steps: int | None = None,
) -> TrainResult:
    """Train with early stopping on dev token accuracy.

    With ``out_dir`` the best model goes to ``out_dir/best``, the latest state to
    ``out_dir/last`` and per-epoch metrics to ``out_dir/metrics.csv``. Shuffling,
    dropout and Gumbel noise are seeded per epoch, so a resumed run reproduces
    the uninterrupted one.
    """
    from .evaluation import translate_corpus  # decoding helpers import training

    train_corpus = filter_length(train_corpus, cfg.max_len)
    params = model.parameters()
    opt = RMSprop(cfg.lr, cfg.rho, cfg.eps)
    result = TrainResult()
    start_epoch, stale, step = 1, 0, 0
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        src_vocab.save(out / "src.vocab")
        tgt_vocab.save(out / "tgt.vocab")
        (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    if resume:
        if out is None or not (out / "last" / "train_state.json").is_file():
            raise FileNotFoundError(f"no resumable state under {out}/last")
        state = json.loads((out / "last" / "train_state.json").read_text(encoding="utf-8"))
        model.params.load_arrays(load_arrays(out / "last" / "params.bin"))
        opt.acc = load_arrays(out / "last" / "optimizer.bin")
        start_epoch = state["epoch"] + 1
        stale, step = state["stale"], state["step"]
        result.best_epoch, result.best_accuracy = state["best_epoch"], state["best_accuracy"]
        result.metrics = read_metrics(out / "metrics.csv")
        if state.get("stopped"):
            result.stopped_early = True
            return result

    n_batches = math.ceil(len(train_corpus) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * n_batches)
    dev_batches = make_batches(dev_corpus, src_vocab, tgt_vocab, cfg.batch_size) if dev_corpus else []

    for epoch in range(start_epoch, cfg.epochs + 1):
        t0 = time.perf_counter()
        opt.lr = epoch_lr(cfg, epoch)
        rng = np.random.default_rng(_epoch_seed(cfg.seed, epoch, 0))
        batches = make_batches(train_corpus, src_vocab, tgt_vocab, cfg.batch_size, shuffle_seed=_epoch_seed(cfg.seed, epoch, 1))
        tot_nll = 0.0
        correct = tokens = refines = 0
        for batch in batches:
            tau = pol.tau_at(step, total_steps, cfg.tau_start, cfg.tau_floor)
            for p in params.values():
                p.grad = None
            with T.Graph() as g:
                loss, nll, _, res = batch_loss(model, batch, True, rng, tau, cfg.alpha)
            g.backward(loss, params=list(params.values()))
            clipped, _ = clip_global_norm([p.grad for p in params.values()], cfg.clip_norm)
            opt.step(params, dict(zip(params, clipped)))
            c, n, r = token_stats(res, batch)
            tot_nll += float(nll.data) * n
            correct += c
            tokens += n
            refines += r
            step += 1
            if max_steps is not None and step >= max_steps:
                break
        wall = time.perf_counter() - t0
        row = dict(
            epoch=epoch,
            split="train",
            nll=tot_nll / tokens,
            token_accuracy=100.0 * correct / tokens,
            bleu="",
            refine_rate=100.0 * refines / tokens,
            wall_seconds=wall,
        )
        result.metrics.append(row)
        improved = True
        if dev_batches:
            m = evaluate_batches(model, dev_batches)
            bleu_score = ""
            if cfg.dev_bleu_max > 0:
                sub = dev_corpus.subset(range(min(cfg.dev_bleu_max, len(dev_corpus))))
                bleu_score = translate_corpus(model, sub, src_vocab, tgt_vocab).bleu
            result.metrics.append(
                dict(
                    epoch=epoch,
                    split="dev",
                    nll=m.nll,
                    token_accuracy=m.token_accuracy,
                    bleu=bleu_score,
                    refine_rate=m.refine_rate,
                    wall_seconds=time.perf_counter() - t0,
                )
            )
            improved = m.token_accuracy > result.best_accuracy
            if improved:
                result.best_accuracy = m.token_accuracy
            log.info("epoch %d train nll %.4f dev nll %.4f acc %.2f%%", epoch, row["nll"], m.nll, m.token_accuracy)
        else:
            log.info("epoch %d train nll %.4f", epoch, row["nll"])
        if improved:
            result.best_epoch = epoch
            result.best_params = {k: p.data.copy() for k, p in params.items()}
            stale = 0
            if out is not None:
                model.save(out / "best")
        else:
            stale += 1
        result.stopped_early = stale >= cfg.patience
        result.steps = step
        if out is not None:
            write_metrics(out / "metrics.csv", result.metrics)
            save_training_state(
                out / "last",
                model,
                opt,
                dict(
                    epoch=epoch,
                    stale=stale,
                    step=step,
                    best_epoch=result.best_epoch,
                    best_accuracy=result.best_accuracy,
                    stopped=result.stopped_early,
                ),
            )
        if result.stopped_early or (max_steps is not None and step >= max_steps):
            break
    result.steps = step
    return result


def write_metrics(path: str | Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in METRIC_FIELDS})


def read_metrics(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            r["epoch"] = int(r["epoch"])
            for k in ("nll", "token_accuracy", "refine_rate", "wall_seconds"):
                r[k] = float(r[k])
            r["bleu"] = float(r["bleu"]) if r["bleu"] else ""
            rows.append(r)
    return rows
