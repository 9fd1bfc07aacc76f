"""Command-line entry point: ``refiner-nmt <command> [flags]``.

Every command accepts ``--config FILE`` with ``key = value`` lines whose keys are
flag names (dashes or underscores). Precedence is flags > file > defaults.
Failures print one line ``refiner-nmt: E<code>: <message>`` to stderr and exit
with 2 (usage), 3 (data) or 4 (runtime). ``REFINER_NMT_LOG`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import CheckpointError
from .config import VARIANTS, ConfigError, ModelConfig, TrainConfig
from .data import TASKS, DataError, ParallelCorpus, gen_corpus, read_corpus, split_corpus, write_corpus, write_manifest
from .vocab import Vocabulary, build_vocab

log = logging.getLogger("refiner_nmt")

PROG = "refiner-nmt"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
LOG_ENV = "REFINER_NMT_LOG"
MANIFEST = "manifest.json"
SPLITS = ("train", "dev", "test")  # slice order; the manifest stores sizes with sorted keys

_MODEL_DEFAULTS = ModelConfig(1, 1)
_TRAIN_DEFAULTS = TrainConfig()


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files ---------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise DataError(f"cannot read config file {path}: {e.strerror}") from None
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"{path}:{n}: expected 'key = value', got {raw.strip()!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install file values as parser defaults, converted by each flag's own type."""
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(values) - set(actions))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    resolved = {}
    for key, raw in values.items():
        action = actions[key]
        if isinstance(action, argparse._StoreTrueAction):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise UsageError(f"config key {key}: expected a boolean, got {raw!r}")
            resolved[key] = raw.lower() in ("true", "1", "yes")
            continue
        try:
            value = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            raise UsageError(f"config key {key}: invalid value {raw!r}") from None
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key}: {value!r} not in {list(action.choices)}")
        resolved[key] = value
    parser.set_defaults(**resolved)


# -- parser ---------------------------------------------------------------------------


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    d = _MODEL_DEFAULTS
    p.add_argument("--variant", choices=VARIANTS, default=d.variant, help="model variant")
    p.add_argument("--d-emb", type=int, default=d.d_emb, help="word embedding size")
    p.add_argument("--d-rnn", type=int, default=d.d_rnn, help="encoder GRU size per direction")
    p.add_argument("--d-dec", type=int, default=d.d_dec, help="decoder GRU size")
    p.add_argument("--d-att", type=int, default=d.d_att, help="attention hidden size")
    p.add_argument("--d-out", type=int, default=d.d_out, help="readout layer size")
    p.add_argument("--d-re", type=int, default=None, help="re-encoder GRU size per direction (default: d-rnn)")
    p.add_argument("--d-policy", type=int, default=d.d_policy, help="policy hidden size")
    p.add_argument("--dropout", type=float, default=d.dropout, help="dropout rate on the readout layer")
    p.add_argument("--init-scale", type=float, default=d.init_scale, help="uniform init half-width")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = _TRAIN_DEFAULTS
    p.add_argument("--lr", type=float, default=d.lr, help="RMSprop learning rate")
    p.add_argument("--clip-norm", type=float, default=d.clip_norm, help="global gradient-norm clip")
    p.add_argument("--rho", type=float, default=d.rho, help="RMSprop decay")
    p.add_argument("--eps", type=float, default=d.eps, help="RMSprop epsilon")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="sentences per batch")
    p.add_argument("--epochs", type=int, default=d.epochs, help="maximum epochs")
    p.add_argument("--patience", type=int, default=d.patience, help="early-stopping patience in epochs")
    p.add_argument("--max-len", type=int, default=d.max_len, help="drop training pairs longer than this")
    p.add_argument("--tau-start", type=float, default=d.tau_start, help="initial Gumbel-Softmax temperature")
    p.add_argument("--tau-floor", type=float, default=d.tau_floor, help="final Gumbel-Softmax temperature")
    p.add_argument("--decay-after", type=int, default=d.decay_after, help="epochs at the full rate before decaying it (0: never)")
    p.add_argument("--lr-decay", type=float, default=d.lr_decay, help="learning-rate factor after --decay-after epochs")
    p.add_argument("--alpha", type=float, default=d.alpha, help="refine-rate penalty weight")
    p.add_argument("--dev-bleu-max", type=int, default=d.dev_bleu_max, help="dev sentences decoded for BLEU per epoch (0: skip)")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many updates")


def _add_decode_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model directory (e.g. OUT/best)")
    p.add_argument("--theta", type=float, default=0.5, help="REFINE threshold for the conditional variant")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog=PROG, description="Encoder-refiner-decoder translation toolkit.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text.replace("%%", "%"), formatter_class=fmt)
        p.add_argument("--config", default=None, help="key = value file; flags override it")
        p.add_argument("--seed", type=int, default=1, help="seed for every random stream")
        return p

    p = command("gen-data", "generate a synthetic parallel corpus split into train/dev/test")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--task", choices=TASKS, default="ambiguous-lexicon", help="generation rule")
    p.add_argument("--n", type=int, default=5000, help="total sentence pairs")
    p.add_argument("--min-len", type=int, default=5, help="minimum source length")
    p.add_argument("--max-len", type=int, default=20, help="maximum source length")
    p.add_argument("--vocab-size", type=int, default=60, help="source vocabulary size")
    p.add_argument("--dev", type=int, default=500, help="dev pairs taken from the corpus")
    p.add_argument("--test", type=int, default=500, help="test pairs taken from the corpus")
    p.add_argument("--replay", default=None, help="regenerate from an existing manifest (overrides generation flags)")

    p = command("train", "train a model; writes OUT/best, OUT/last and OUT/metrics.csv")
    p.add_argument("--train", required=True, help="training corpus prefix (PREFIX.src, PREFIX.tgt)")
    p.add_argument("--dev", default=None, help="dev corpus prefix for early stopping")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--vocab-max", type=int, default=30000, help="vocabulary size cap per side, reserved ids included")
    p.add_argument("--resume", action="store_true", help="continue from OUT/last")
    _add_model_flags(p)
    _add_train_flags(p)

    p = command("translate", "translate a source file, one hypothesis per line")
    _add_decode_flags(p)
    p.add_argument("--input", required=True, help="tokenized source file")
    p.add_argument("--output", default="-", help="output file ('-' for stdout)")
    p.add_argument("--beam", type=int, default=10, help="beam size (1: greedy)")
    p.add_argument("--length-norm", type=float, default=1.0, help="length-normalization exponent")
    p.add_argument("--trace-dir", default=None, help="write one policy-trace CSV per sentence here")

    p = command("evaluate", "corpus BLEU and per-length-bucket BLEU")
    p.add_argument("--ref", required=True, help="reference file, or a corpus prefix when --model is given")
    p.add_argument("--hyp", default=None, help="hypothesis file to score")
    p.add_argument("--model", default=None, help="model directory; translates PREFIX.src first")
    p.add_argument("--theta", type=float, default=0.5, help="REFINE threshold for the conditional variant")
    p.add_argument("--beam", type=int, default=10, help="beam size when translating")
    p.add_argument("--length-norm", type=float, default=1.0, help="length-normalization exponent")
    p.add_argument("--src", default=None, help="source file for length buckets (default: PREFIX.src)")
    p.add_argument("--edges", default="15,30,45", help="comma-separated bucket edges on source length")
    p.add_argument("--report", default=None, help="write the bucket table as CSV here")

    p = command("bench", "greedy-decoding speed (words/second) and refine rate P%%")
    _add_decode_flags(p)
    p.add_argument("--input", required=True, help="tokenized source file")
    p.add_argument("--repeats", type=int, default=3, help="timed passes; the median is reported")
    p.add_argument("--warmup", type=int, default=20, help="untimed warm-up sentences")
    p.add_argument("--report", default=None, help="write the result as JSON here")

    p = command("saliency", "gate saliency matrix for one sentence pair (CSV and PGM)")
    _add_decode_flags(p)
    p.add_argument("--source", required=True, help="source sentence, space-separated tokens")
    p.add_argument("--target", required=True, help="target sentence, space-separated tokens")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX.csv and PREFIX.pgm")
    return parser


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(subparser, read_config_file(args.config))
        args = parser.parse_args(argv)
    return args


# -- helpers ---------------------------------------------------------------------------


def _need_file(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"{what} not found: {p}")
    return p


def _read_lines(path: str | Path, what: str) -> list[list[str]]:
    with open(_need_file(path, what), encoding="utf-8") as fh:
        return [line.split() for line in fh]


def _read_prefix(prefix: str, what: str) -> ParallelCorpus:
    for ext in (".src", ".tgt"):
        _need_file(prefix + ext, f"{what} file")
    return read_corpus(prefix)


def _find_vocab(model_dir: Path, side: str) -> Vocabulary:
    for d in (model_dir, model_dir.parent):
        if (d / f"{side}.vocab").is_file():
            return Vocabulary.load(d / f"{side}.vocab")
    raise DataError(f"no {side}.vocab in {model_dir} or its parent")


def _load_model(model_dir: str):
    from .model import RefinerNMT

    d = Path(model_dir)
    _need_file(d / "model.json", "model config")
    _need_file(d / "params.bin", "model parameters")
    return RefinerNMT.load(d), _find_vocab(d, "src"), _find_vocab(d, "tgt")


def _write_lines(path: str, texts) -> None:
    out = sys.stdout if path == "-" else open(path, "w", encoding="utf-8")
    try:
        for t in texts:
            out.write(" ".join(t) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


# -- commands --------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if args.replay:
        meta = json.loads(_need_file(args.replay, "manifest").read_text(encoding="utf-8"))
        try:
            task, n, seed = meta["task"], meta["n"], meta["seed"]
            lo, hi = meta["len_range"]
            vocab_size = meta["vocab_size"]
            sizes = {name: int(meta["splits"][name]) for name in SPLITS}
        except (KeyError, ValueError, TypeError) as e:
            raise DataError(f"manifest {args.replay} is missing field {e}") from None
    else:
        task, n, seed, lo, hi, vocab_size = args.task, args.n, args.seed, args.min_len, args.max_len, args.vocab_size
        if args.dev < 0 or args.test < 0 or args.dev + args.test >= n:
            raise DataError(f"dev ({args.dev}) + test ({args.test}) must be smaller than n ({n})")
        sizes = dict(zip(SPLITS, (n - args.dev - args.test, args.dev, args.test)))
    log.info("gen-data task=%s n=%d seed=%d", task, n, seed)
    corpus = gen_corpus(task, n, (lo, hi), vocab_size, seed)
    try:
        out.mkdir(parents=True, exist_ok=True)
        parts = split_corpus(corpus, list(sizes.values()))
        for name, part in zip(sizes, parts):
            write_corpus(part, out / name)
        meta = dict(task=task, n=n, seed=seed, len_range=[lo, hi], vocab_size=vocab_size, splits=dict(sizes))
        write_manifest(out / MANIFEST, meta)
    except OSError as e:
        raise DataError(f"cannot write corpus under {out}: {e.strerror}") from None
    print(f"wrote {n} pairs to {out}")
    return EXIT_OK


def _configs(args, sv: Vocabulary, tv: Vocabulary) -> tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(
        len(sv),
        len(tv),
        variant=args.variant,
        d_emb=args.d_emb,
        d_rnn=args.d_rnn,
        d_dec=args.d_dec,
        d_att=args.d_att,
        d_out=args.d_out,
        d_re=args.d_re,
        d_policy=args.d_policy,
        dropout=args.dropout,
        init_scale=args.init_scale,
        seed=args.seed,
    )
    tc = TrainConfig(
        lr=args.lr,
        clip_norm=args.clip_norm,
        rho=args.rho,
        eps=args.eps,
        batch_size=args.batch_size,
        epochs=args.epochs,
        patience=args.patience,
        max_len=args.max_len,
        tau_start=args.tau_start,
        tau_floor=args.tau_floor,
        alpha=args.alpha,
        seed=args.seed,
        dev_bleu_max=args.dev_bleu_max,
        decay_after=args.decay_after,
        lr_decay=args.lr_decay,
    )
    return mc, tc


def cmd_train(args) -> int:
    from .model import RefinerNMT
    from .training import train

    out = Path(args.out)
    train_corpus = _read_prefix(args.train, "training corpus")
    dev_corpus = _read_prefix(args.dev, "dev corpus") if args.dev else None
    if args.resume:
        _need_file(out / "last" / "train_state.json", "resumable training state")
        sv, tv = Vocabulary.load(out / "src.vocab"), Vocabulary.load(out / "tgt.vocab")
        model = RefinerNMT(ModelConfig.load(out / "last" / "model.json"))
        tc = TrainConfig.from_dict(json.loads((out / "train_config.json").read_text(encoding="utf-8")))
        tc.epochs = args.epochs
    else:
        sv = build_vocab(train_corpus.sources, args.vocab_max)
        tv = build_vocab(train_corpus.targets, args.vocab_max)
        mc, tc = _configs(args, sv, tv)
        model = RefinerNMT(mc)
    log.info("train variant=%s seed=%d params=%d", model.variant, tc.seed, model.num_params)
    result = train(model, train_corpus, dev_corpus, sv, tv, tc, out, resume=args.resume, max_steps=args.max_steps)
    print(f"trained {result.steps} steps; best epoch {result.best_epoch}; model in {out / 'best'}")
    return EXIT_OK


def cmd_translate(args) -> int:
    from .decoding import beam_search, greedy_decode
    from .evaluation import default_max_len

    model, sv, tv = _load_model(args.model)
    sources = _read_lines(args.input, "input file")
    trace_dir = Path(args.trace_dir) if args.trace_dir else None
    if trace_dir is not None:
        trace_dir.mkdir(parents=True, exist_ok=True)
    texts = []
    for k, src in enumerate(sources):
        ids = sv.encode(src)
        if not ids:
            texts.append([])
            continue
        if args.beam <= 1:
            hyp = greedy_decode(model, ids, default_max_len(len(ids)), theta=args.theta)
        else:
            hyp = beam_search(model, ids, args.beam, default_max_len(len(ids)), args.length_norm, theta=args.theta)
        texts.append(tv.decode(hyp.tokens))
        if trace_dir is not None and hyp.trace is not None:
            hyp.trace.to_csv(trace_dir / f"{k:06d}.csv")
    _write_lines(args.output, texts)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .bleu import bleu
    from .evaluation import length_bucket_report, translate_corpus, write_bucket_report

    try:
        edges = [int(e) for e in args.edges.split(",") if e.strip()]
    except ValueError:
        raise UsageError(f"--edges must be comma-separated integers, got {args.edges!r}") from None
    if args.model:
        corpus = _read_prefix(args.ref, "test corpus")
        model, sv, tv = _load_model(args.model)
        res = translate_corpus(model, corpus, sv, tv, args.beam, args.theta, args.length_norm)
        hyps, refs, srcs = res.texts, corpus.targets, corpus.sources
    else:
        if not args.hyp:
            raise UsageError("evaluate needs --hyp FILE or --model DIR")
        hyps, refs = _read_lines(args.hyp, "hypothesis file"), _read_lines(args.ref, "reference file")
        srcs = _read_lines(args.src, "source file") if args.src else None
        if len(hyps) != len(refs):
            raise DataError(f"{len(hyps)} hypotheses but {len(refs)} references")
    print(f"BLEU = {bleu(hyps, refs):.2f}")
    if srcs is not None:
        rows = length_bucket_report(srcs, hyps, refs, edges)
        for r in rows:
            print(f"bucket {r.label}\tn={r.count}\tBLEU = {r.bleu:.2f}")
        if args.report:
            write_bucket_report(args.report, rows)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .evaluation import speed_benchmark

    model, sv, _ = _load_model(args.model)
    sources = [sv.encode(s) for s in _read_lines(args.input, "input file") if s]
    rep = speed_benchmark(model, sources, args.repeats, args.theta, args.warmup)
    print(f"words/sec = {rep.words_per_second:.1f}\tP = {rep.refine_rate:.1f}%")
    if args.report:
        Path(args.report).write_text(
            json.dumps(dict(words_per_second=rep.words_per_second, refine_rate=rep.refine_rate, steps=rep.steps, seconds=rep.seconds), indent=2)
            + "\n",
            encoding="utf-8",
        )
    return EXIT_OK


def cmd_saliency(args) -> int:
    from .evaluation import saliency_map, write_saliency
    from .vocab import EOS

    model, sv, tv = _load_model(args.model)
    src, tgt = args.source.split(), args.target.split()
    if not src or not tgt:
        raise DataError("source and target must be nonempty")
    if model.mode is None:
        raise UsageError(f"saliency needs a gated variant, model is {model.variant!r}")
    matrix = saliency_map(model, sv.encode(src), tv.encode(tgt) + [EOS], args.theta)
    csv_path, pgm_path = write_saliency(args.out, matrix, src, tgt + ["</s>"])
    print(f"wrote {csv_path} and {pgm_path}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "saliency": cmd_saliency,
}


def _fail(code: int, message: str) -> int:
    print(f"{PROG}: E{code}: {' '.join(str(message).split())}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = parse_args(sys.argv[1:] if argv is None else list(argv))
        log.info("command=%s seed=%d", args.command, args.seed)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as e:
        return _fail(EXIT_USAGE, e)
    except (DataError, CheckpointError, FileNotFoundError, UnicodeDecodeError) as e:
        return _fail(EXIT_DATA, e)
    except KeyboardInterrupt:
        return _fail(EXIT_RUNTIME, "interrupted")
    except Exception as e:  # noqa: BLE001 - top-level guard maps everything else to one exit code
        log.debug("unhandled error", exc_info=True)
        return _fail(EXIT_RUNTIME, f"{type(e).__name__}: {e}")


if __name__ == "__main__":
    sys.exit(main())
