"""Desk-scale comparison of the refiner variants on the ambiguous-lexicon task.

Run with ``python -m refiner_nmt.experiments --out results.json``. Every
(variant, seed) run trains on one fixed synthetic corpus, restores the
best-on-dev parameters and is scored on the held-out test split. Conditional
models start from the trained deep model of the same seed and are then
trained with the refine penalty for a few epochs per alpha.
"""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .config import ModelConfig, TrainConfig
from .data import gen_corpus, make_batches, split_corpus
from .evaluation import DEFAULT_EDGES, length_bucket_report, translate_corpus
from .model import RefinerNMT
from .training import evaluate_batches, train
from .vocab import build_vocab

log = logging.getLogger(__name__)

CORE_VARIANTS = ("baseline", "shallow", "deep", "hard-shallow", "hard-deep")
DECODED_VARIANTS = ("baseline", "deep")


@dataclass
class ExperimentConfig:
    task: str = "ambiguous-lexicon"
    n: int = 5000
    vocab_size: int = 60
    len_range: tuple[int, int] = (5, 20)
    splits: tuple[int, int, int] = (4000, 500, 500)
    data_seed: int = 1
    seeds: tuple[int, ...] = (1, 2, 3)
    d: int = 32
    d_emb: int = 16
    dropout: float = 0.3
    init_scale: float = 0.3
    lr: float = 1e-2
    batch_size: int = 32
    epochs: int = 10
    decay_after: int = 0  # epochs before lr drops tenfold (0: constant rate)
    variants: tuple[str, ...] = CORE_VARIANTS
    alphas: tuple[float, ...] = (0.0, 0.05, 0.2, 1.0)
    cond_epochs: int = 3
    cond_lr: float = 1e-3  # fine-tuning restarts RMSprop; the full rate would wreck the warm start
    theta: float = 0.5
    decode_repeats: int = 3  # timed decoding passes per model; the median is kept
    edges: tuple[int, ...] = DEFAULT_EDGES

    def model_config(self, variant: str, src_size: int, tgt_size: int, seed: int) -> ModelConfig:
        d = self.d
        return ModelConfig(
            src_size,
            tgt_size,
            variant=variant,
            d_emb=self.d_emb,
            d_rnn=d,
            d_dec=d,
            d_att=d,
            d_out=d,
            d_policy=d,
            dropout=self.dropout,
            init_scale=self.init_scale,
            seed=seed,
        )

    def train_config(self, seed: int, epochs: int, alpha: float = 0.0, lr: float | None = None) -> TrainConfig:
        # patience equal to the epoch budget: best-on-dev selection without early exit
        return TrainConfig(
            lr=self.lr if lr is None else lr,
            decay_after=self.decay_after if lr is None else 0,
            batch_size=self.batch_size,
            epochs=epochs,
            patience=max(1, epochs),
            alpha=alpha,
            seed=seed,
            dev_bleu_max=0,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class RunRecord:
    variant: str
    seed: int
    alpha: float | None
    test_accuracy: float
    test_nll: float
    best_epoch: int
    train_seconds: float
    refine_rate: float | None = None
    bleu: float | None = None
    decode_seconds: float | None = None
    buckets: list[dict] = field(default_factory=list)


def _decode(model, corpus, sv, tv, theta, edges, repeats=1) -> dict:
    passes = [translate_corpus(model, corpus, sv, tv, theta=theta) for _ in range(max(1, repeats))]
    res = passes[0]
    rows = length_bucket_report(corpus.sources, res.texts, corpus.targets, edges)
    return dict(
        refine_rate=res.refine_rate if model.conditional else None,
        bleu=res.bleu,
        decode_seconds=statistics.median(p.seconds for p in passes),
        buckets=[asdict(r) for r in rows],
    )


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Train and score every run; returns a JSON-ready dict."""
    corpus = gen_corpus(cfg.task, cfg.n, tuple(cfg.len_range), cfg.vocab_size, cfg.data_seed)
    tr, dev, test = split_corpus(corpus, cfg.splits)
    sv, tv = build_vocab(tr.sources, 30000), build_vocab(tr.targets, 30000)
    test_batches = make_batches(test, sv, tv, cfg.batch_size)
    runs: list[RunRecord] = []
    t_start = time.perf_counter()

    def fit(model, tcfg):
        t0 = time.perf_counter()
        result = train(model, tr, dev, sv, tv, tcfg)
        model.params.load_arrays(result.best_params)
        return result, time.perf_counter() - t0

    for seed in cfg.seeds:
        trained = {}
        for variant in cfg.variants:
            model = RefinerNMT(cfg.model_config(variant, len(sv), len(tv), seed))
            result, secs = fit(model, cfg.train_config(seed, cfg.epochs))
            m = evaluate_batches(model, test_batches, cfg.theta)
            rec = RunRecord(variant, seed, None, m.token_accuracy, m.nll, result.best_epoch, secs)
            if variant in DECODED_VARIANTS:
                for k, v in _decode(model, test, sv, tv, cfg.theta, cfg.edges, cfg.decode_repeats).items():
                    setattr(rec, k, v)
            runs.append(rec)
            trained[variant] = model
            log.info("seed %d %-12s acc %.2f%% (%.0fs)", seed, variant, m.token_accuracy, secs)

        deep = trained.get("deep")
        for alpha in cfg.alphas if deep is not None else ():
            model = RefinerNMT(cfg.model_config("conditional", len(sv), len(tv), seed))
            model.params.load_arrays({**model.params.arrays(), **deep.params.arrays()})
            result, secs = fit(model, cfg.train_config(seed, cfg.cond_epochs, alpha, cfg.cond_lr))
            m = evaluate_batches(model, test_batches, cfg.theta)
            rec = RunRecord("conditional", seed, alpha, m.token_accuracy, m.nll, result.best_epoch, secs)
            for k, v in _decode(model, test, sv, tv, cfg.theta, cfg.edges, cfg.decode_repeats).items():
                setattr(rec, k, v)
            runs.append(rec)
            log.info("seed %d conditional a=%g acc %.2f%% P %.1f%%", seed, alpha, m.token_accuracy, rec.refine_rate)

    return dict(
        config=asdict(cfg),
        runs=[asdict(r) for r in runs],
        total_seconds=time.perf_counter() - t_start,
    )


# -- summaries -------------------------------------------------------------------------


def _select(runs, variant, alpha=None):
    return [r for r in runs if r["variant"] == variant and r["alpha"] == alpha]


def mean_accuracy(runs: list[dict], variant: str, alpha: float | None = None) -> float:
    return statistics.fmean(r["test_accuracy"] for r in _select(runs, variant, alpha))


def core_seconds(runs: list[dict], variants=("baseline", "shallow", "deep")) -> float:
    """Training time of the runs the accuracy ordering is judged on."""
    return sum(r["train_seconds"] for r in runs if r["variant"] in variants and r["alpha"] is None)


def bucket_gains(runs: list[dict]) -> dict[str, float]:
    """Relative BLEU gain of deep over baseline per length bucket, pooled over seeds."""
    pooled: dict[str, list[float]] = {}
    for variant in ("baseline", "deep"):
        for r in _select(runs, variant):
            for b in r["buckets"]:
                pooled.setdefault(b["label"], [[], []])[variant == "deep"].append(b["bleu"])
    order = sorted(pooled, key=lambda lab: next(b["lo"] for r in runs for b in r["buckets"] if b["label"] == lab))
    out = {}
    for lab in order:
        base, deep = (statistics.fmean(v) for v in pooled[lab])
        out[lab] = (deep - base) / base if base > 0 else float("inf")
    return out


def tradeoff_table(runs: list[dict], alphas) -> list[dict]:
    """Per alpha: mean P%, accuracy and decode time relative to greedy deep decoding."""
    deep_secs = statistics.fmean(r["decode_seconds"] for r in _select(runs, "deep"))
    deep_acc = mean_accuracy(runs, "deep")
    rows = []
    for a in alphas:
        sel = _select(runs, "conditional", a)
        secs = statistics.fmean(r["decode_seconds"] for r in sel)
        acc = statistics.fmean(r["test_accuracy"] for r in sel)
        rows.append(
            dict(
                alpha=a,
                refine_rate=statistics.fmean(r["refine_rate"] for r in sel),
                accuracy=acc,
                accuracy_drop=deep_acc - acc,
                speedup=1.0 - secs / deep_secs,
            )
        )
    return rows


def format_summary(results: dict) -> str:
    runs = results["runs"]
    cfg = results["config"]
    lines = ["variant        acc%   (per seed)"]
    for v in cfg["variants"]:
        per = [round(r["test_accuracy"], 2) for r in _select(runs, v)]
        lines.append(f"{v:<14} {mean_accuracy(runs, v):6.2f} {per}")
    if any(r["variant"] == "conditional" for r in runs):
        lines.append("alpha   P%     acc%   drop  speedup")
        for row in tradeoff_table(runs, cfg["alphas"]):
            lines.append(
                f"{row['alpha']:<6g} {row['refine_rate']:5.1f} {row['accuracy']:6.2f} "
                f"{row['accuracy_drop']:5.2f} {100 * row['speedup']:6.1f}%"
            )
    if any(r["buckets"] for r in runs):
        gains = ", ".join(f"{k}: {100 * g:+.1f}%" for k, g in bucket_gains(runs).items())
        lines.append(f"deep over baseline by length: {gains}")
    lines.append(f"core training time {core_seconds(runs):.0f}s, total {results['total_seconds']:.0f}s")
    return "\n".join(lines)


def load_or_run(path: str | Path, cfg: ExperimentConfig | None = None) -> dict:
    """Reuse cached results when they were produced by the same configuration."""
    cfg = cfg or ExperimentConfig()
    path = Path(path)
    if path.is_file():
        cached = json.loads(path.read_text(encoding="utf-8"))
        # compared as JSON so a cache written before a config field existed is not reused
        if cached.get("config") == json.loads(json.dumps(asdict(cfg))):
            return cached
    results = run_experiment(cfg)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(results, indent=1) + "\n", encoding="utf-8")
    return results


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="python -m refiner_nmt.experiments", description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="experiment_results.json", help="results cache (default: %(default)s)")
    ap.add_argument("--seeds", default="1,2,3", help="comma-separated seeds (default: %(default)s)")
    ap.add_argument("--epochs", type=int, default=ExperimentConfig.epochs, help="epochs per variant (default: %(default)s)")
    ap.add_argument("--decay-after", type=int, default=0, help="epochs before the rate drops tenfold (default: constant)")
    ap.add_argument("--alphas", default=",".join(f"{a:g}" for a in ExperimentConfig.alphas), help="penalty grid (default: %(default)s)")
    ap.add_argument("--force", action="store_true", help="ignore a cached result")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    cfg = ExperimentConfig(
        seeds=tuple(int(s) for s in args.seeds.split(",")),
        epochs=args.epochs,
        decay_after=args.decay_after,
        alphas=tuple(float(a) for a in args.alphas.split(",")),
    )
    if args.force:
        Path(args.out).unlink(missing_ok=True)
    print(format_summary(load_or_run(args.out, cfg)))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
