"""Greedy and beam search, corpus translation, buckets, speed and saliency."""

import itertools
import math

import numpy as np
import pytest
from helpers import toy_model

from refiner_nmt import tensor as T
from refiner_nmt.bleu import bleu
from refiner_nmt.config import TrainConfig
from refiner_nmt.data import ParallelCorpus, gen_corpus
from refiner_nmt.decoding import _mask_specials, beam_search, greedy_decode
from refiner_nmt.evaluation import (
    bucket_index,
    decoded_token_accuracy,
    length_bucket_report,
    read_pgm,
    saliency_map,
    speed_benchmark,
    step_losses,
    translate_corpus,
    write_bucket_report,
    write_saliency,
)
from refiner_nmt.training import train
from refiner_nmt.vocab import BOS, EOS, build_vocab


def _sources(n, vocab=9, seed=0, lo=2, hi=7):
    rng = np.random.default_rng(seed)
    return [list(rng.integers(4, vocab, size=rng.integers(lo, hi))) for _ in range(n)]


# -- a hand-built two-step model ------------------------------------------------------

A, B_ = 4, 5


class _TableSession:
    """Next-token distribution looked up by prefix; ids: EOS=3, a=4, b=5."""

    TABLE = {
        (): {A: 0.5, B_: 0.4, EOS: 0.1},
        (A,): {A: 0.3, B_: 0.3, EOS: 0.4},
        (B_,): {A: 0.05, B_: 0.05, EOS: 0.9},
    }

    def initial_state(self):
        return ()

    def step(self, state, prev):
        prefix = state if prev == BOS else state + (prev,)
        logp = np.full(6, -np.inf)
        for k, p in self.TABLE.get(prefix, {EOS: 1.0}).items():
            logp[k] = math.log(p)
        return logp, prefix


class _TableModel:
    def session(self, src_ids, **opts):
        return _TableSession()


class TestHandBuiltModel:
    def test_greedy_takes_the_locally_best_path(self):
        hyp = greedy_decode(_TableModel(), [4], 2)
        assert hyp.tokens == [A, EOS]
        assert hyp.logprob == pytest.approx(math.log(0.5 * 0.4))

    def test_beam_finds_the_better_path(self):
        hyp = beam_search(_TableModel(), [4], beam_size=2, max_len=2)
        assert hyp.tokens == [B_, EOS]
        assert hyp.logprob == pytest.approx(math.log(0.4 * 0.9))

    def test_length_normalization_prefers_short_finished(self):
        # raw scores: [EOS] = log .1 ; [b, EOS] = log .36 ; per-token favours the longer one
        assert beam_search(_TableModel(), [4], 3, 2, length_norm=0.0).tokens == [B_, EOS]
        assert beam_search(_TableModel(), [4], 3, 2, length_norm=1.0).tokens == [B_, EOS]


# -- real models ----------------------------------------------------------------------


class TestGreedy:
    def test_max_len_one_gives_one_token(self):
        hyp = greedy_decode(toy_model("deep"), [4, 5, 6], 1)
        assert len(hyp.tokens) == 1

    def test_invalid_max_len(self):
        with pytest.raises(ValueError):
            greedy_decode(toy_model("baseline"), [4], 0)

    def test_baseline_performs_no_refines(self):
        res = translate_corpus(toy_model("baseline"), _corpus(10), _vocab(), _vocab())
        assert res.refine_ops == 0 and res.refine_rate == 0.0

    def test_hypothesis_invariants(self):
        model = toy_model("conditional")
        for src in _sources(20):
            hyp = greedy_decode(model, src, 6)
            assert hyp.finished or len(hyp.tokens) == 6
            assert math.isfinite(hyp.logprob)
            assert len(hyp.attention) == len(hyp.tokens)
            assert len(hyp.trace) == len(hyp.tokens)

    def test_memorized_pair_is_reproduced(self):
        corpus = ParallelCorpus([(["a", "b", "c", "d"], ["x", "y", "z"])])
        sv, tv = build_vocab(corpus.sources, 20), build_vocab(corpus.targets, 20)
        model = toy_model("deep", d=16, vocab=max(len(sv), len(tv)), dropout=0.0)
        train(model, corpus, None, sv, tv, TrainConfig(lr=0.01, batch_size=1, epochs=150, patience=1000, dev_bleu_max=0))
        hyp = greedy_decode(model, sv.encode(["a", "b", "c", "d"]), 10)
        assert tv.decode(hyp.tokens) == ["x", "y", "z"]
        assert hyp.finished


class TestBeam:
    @pytest.mark.parametrize("variant", ["baseline", "deep", "conditional"])
    def test_beam_one_equals_greedy(self, variant):
        model = toy_model(variant)
        n = 200 if variant == "baseline" else 40
        for src in _sources(n, seed=1):
            g = greedy_decode(model, src, 12)
            b = beam_search(model, src, 1, 12)
            assert b.tokens == g.tokens
            assert b.logprob == pytest.approx(g.logprob, abs=1e-12)

    def test_score_monotone_in_beam_and_reaches_exhaustive_optimum(self):
        # 5 emittable tokens (UNK, EOS, three words) and at most 4 steps
        model = toy_model("baseline", vocab=7, seed=8, init_scale=1.0)
        for src in _sources(25, vocab=7, seed=2):
            scores = [beam_search(model, src, k, 4).score() for k in (1, 2, 3, 5, 10, 125)]
            assert all(a <= b + 1e-12 for a, b in zip(scores, scores[1:])), scores
            assert scores[-1] == pytest.approx(_exhaustive_best(model, src, 4), abs=1e-12)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            beam_search(toy_model("baseline"), [4], 0)
        with pytest.raises(ValueError):
            beam_search(toy_model("baseline"), [4], 2, 0)


def _exhaustive_best(model, src, max_len):
    """Best per-token score over every EOS-terminated or max-length sequence."""
    sess = model.session(src)
    best = -np.inf
    frontier = [((), 0.0, sess.initial_state())]
    for t in range(max_len):
        nxt = []
        for toks, lp, state in frontier:
            logp, nstate = sess.step(state, toks[-1] if toks else BOS)
            logp = _mask_specials(logp)
            for k in np.flatnonzero(np.isfinite(logp)):
                cand = (toks + (int(k),), lp + float(logp[k]), nstate)
                if k == EOS or t == max_len - 1:
                    best = max(best, cand[1] / len(cand[0]))
                else:
                    nxt.append(cand)
        frontier = nxt
    return best


# -- corpus level ---------------------------------------------------------------------


def _vocab():
    return build_vocab([[f"w{k}" for k in range(5)]], 9)


def _corpus(n, seed=0):
    v = _vocab()
    pairs = [(v.decode(s), v.decode(s)) for s in _sources(n, seed=seed)]
    return ParallelCorpus(pairs)


class TestCorpusTranslation:
    def test_deterministic(self):
        model, c, v = toy_model("conditional"), _corpus(15), _vocab()
        assert translate_corpus(model, c, v, v).texts == translate_corpus(model, c, v, v).texts

    def test_deep_refines_every_step(self):
        res = translate_corpus(toy_model("deep"), _corpus(10), _vocab(), _vocab())
        assert res.refine_rate == 100.0

    def test_token_accuracy_hand_case(self):
        assert decoded_token_accuracy([["a", "b", "x"], ["c"]], [["a", "b", "c"], ["c", "d"]]) == 60.0


class TestBuckets:
    def _data(self):
        c = gen_corpus("swap-lexicon", 120, (5, 40), 20, 3)
        rng = np.random.default_rng(0)
        hyps = [[t if rng.random() < 0.8 else "oops" for t in ref] for ref in c.targets]
        return c.sources, hyps, c.targets

    def test_single_bucket_equals_corpus_bleu(self):
        src, hyp, ref = self._data()
        (row,) = length_bucket_report(src, hyp, ref, edges=[])
        assert row.bleu == bleu(hyp, ref) and row.count == len(src)

    def test_assignment_matches_independent_recount(self):
        src, hyp, ref = self._data()
        rows = length_bucket_report(src, hyp, ref, (15, 30, 45))
        lens = np.array([len(s) for s in src])
        expect = [int((lens < 15).sum()), int(((lens >= 15) & (lens < 30)).sum()), int((lens >= 30).sum())]
        assert [r.count for r in rows] == expect
        assert [r.label for r in rows] == ["<15", "[15,30)", "[30,45)"]

    def test_empty_bucket_absent(self):
        src, hyp, ref = self._data()
        labels = [r.label for r in length_bucket_report(src, hyp, ref, (15, 30, 45))]
        assert ">=45" not in labels

    def test_edges_must_ascend(self):
        with pytest.raises(ValueError):
            length_bucket_report([["a"]], [["a"]], [["a"]], (30, 15))

    def test_bucket_index_boundaries(self):
        assert [bucket_index(n, (15, 30)) for n in (14, 15, 29, 30)] == [0, 1, 1, 2]

    def test_report_file(self, tmp_path):
        src, hyp, ref = self._data()
        write_bucket_report(tmp_path / "b.csv", length_bucket_report(src, hyp, ref))
        assert (tmp_path / "b.csv").read_text().splitlines()[0] == "bucket,lo,hi,count,bleu"


class TestSpeed:
    def test_refine_rates_by_variant(self):
        srcs = _sources(10)
        assert speed_benchmark(toy_model("baseline"), srcs, 1, warmup=2).refine_rate == 0.0
        assert speed_benchmark(toy_model("deep"), srcs, 1, warmup=2).refine_rate == 100.0
        p = speed_benchmark(toy_model("conditional"), srcs, 1, warmup=2).refine_rate
        assert 0.0 < p <= 100.0

    def test_deep_is_slower_than_shallow(self):
        srcs = _sources(30, lo=8, hi=15)
        deep = speed_benchmark(toy_model("deep", d=16), srcs, 3, warmup=5)
        shallow = speed_benchmark(toy_model("shallow", d=16), srcs, 3, warmup=5)
        assert deep.words_per_second < shallow.words_per_second
        assert len(deep.seconds) == 3


class TestSaliency:
    @pytest.mark.parametrize("variant", ["shallow", "deep", "hard-shallow"])
    def test_matches_finite_differences(self, variant):
        model = toy_model(variant, init_scale=1.0)
        src, tgt = [5, 6], [7, EOS]
        sal = saliency_map(model, src, tgt)
        assert sal.shape == (2, 2) and np.all(sal >= 0)
        eps = 1e-6
        fd = np.zeros_like(sal)
        width = 1 if variant.startswith("hard") else model.cfg.d_h
        for i in range(2):
            for j in range(2):
                for u in range(width):

                    def hook(step, z, sign):
                        if step != i:
                            return z
                        bumped = z.data.copy()
                        bumped[0, j, u] += sign * eps
                        return T.Tensor(bumped)

                    up = step_losses(model, src, tgt, lambda s, z: hook(s, z, 1.0))[i]
                    down = step_losses(model, src, tgt, lambda s, z: hook(s, z, -1.0))[i]
                    fd[i, j] += abs((up - down) / (2 * eps))
        np.testing.assert_allclose(sal, fd, rtol=1e-3)

    def test_baseline_rejected(self):
        with pytest.raises(ValueError, match="gated"):
            saliency_map(toy_model("baseline"), [4], [EOS])

    def test_files(self, tmp_path):
        m = np.array([[0.0, 2.0], [1.0, 0.5], [0.2, 0.1]])
        csv_path, pgm_path = write_saliency(tmp_path / "sal", m, ["a", "b"], ["x", "y", "</s>"])
        img = read_pgm(pgm_path)
        assert img.shape == (3, 2) and img.max() == 255 and img[0, 0] == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "target,a,b" and len(lines) == 4


def test_exhaustive_oracle_counts_paths():
    # 5 emittable tokens, depth 2: 1 EOS path of length 1, 4*5 of length 2
    model = toy_model("baseline", vocab=7)
    sess = model.session([4])
    logp, _ = sess.step(sess.initial_state(), BOS)
    assert np.isfinite(_mask_specials(logp)).sum() == 5
    assert len(list(itertools.product(range(4), range(5)))) + 1 == 21
