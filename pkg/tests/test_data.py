"""Synthetic corpora, vocabularies, batching and parameter files."""

from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refiner_nmt.bleu import bleu
from refiner_nmt.checkpoint import CheckpointError, load_arrays, save_arrays
from refiner_nmt.data import (
    MARKERS,
    TASKS,
    DataError,
    Lexicon,
    gen_corpus,
    make_batches,
    read_corpus,
    split_corpus,
    write_corpus,
)
from refiner_nmt.vocab import BOS, EOS, PAD, UNK, Vocabulary, build_vocab


class TestGenCorpus:
    def test_copy_and_reverse_rules(self):
        assert Lexicon.build("copy", 5, 0).translate(["a", "b", "c"]) == ["a", "b", "c"]
        assert Lexicon.build("reverse", 5, 0).translate(["a", "b", "c"]) == ["c", "b", "a"]

    def test_marker_selects_sense(self):
        lex = Lexicon.build("ambiguous-lexicon", 60, 4)
        x = lex.homographs[0]
        one = lex.translate(["M1", x])
        two = lex.translate([x, lex.content[0], "M2"])
        assert one == [lex.senses[(x, "M1")]]
        assert two[0] == lex.senses[(x, "M2")] and two[0] != one[0]

    def test_every_sentence_needs_the_marker(self):
        c = gen_corpus("ambiguous-lexicon", 200, (5, 20), 60, 2)
        lex = Lexicon.build("ambiguous-lexicon", 60, 2)
        for src, _ in c.pairs:
            assert sum(t in MARKERS for t in src) == 1
            assert any(t in lex.homographs for t in src)

    @pytest.mark.parametrize("task", TASKS)
    def test_oracle_translator_scores_100(self, task):
        c = gen_corpus(task, 300, (5, 20), 60, 7)
        lex = Lexicon.build(task, 60, 7)
        assert bleu([lex.translate(s) for s in c.sources], c.targets) == pytest.approx(100.0)

    @pytest.mark.parametrize("task", TASKS)
    def test_deterministic_given_seed(self, task):
        assert gen_corpus(task, 50, (5, 9), 20, 3).pairs == gen_corpus(task, 50, (5, 9), 20, 3).pairs
        assert gen_corpus(task, 50, (5, 9), 20, 3).pairs != gen_corpus(task, 50, (5, 9), 20, 4).pairs

    def test_lengths_within_range(self):
        c = gen_corpus("swap-lexicon", 400, (5, 20), 30, 1)
        lens = [len(s) for s in c.sources]
        assert min(lens) == 5 and max(lens) == 20

    @pytest.mark.parametrize("rng", [(1, 5), (0, 5), (6, 5), (5, 51)])
    def test_invalid_length_range(self, rng):
        with pytest.raises(DataError):
            gen_corpus("copy", 10, rng, 10, 0)

    def test_unknown_task_and_empty_corpus(self):
        with pytest.raises(DataError):
            gen_corpus("shuffle", 10)
        with pytest.raises(DataError):
            gen_corpus("copy", 0)

    def test_split_is_disjoint_and_ordered(self):
        c = gen_corpus("copy", 30, (5, 8), 10, 0)
        a, b = split_corpus(c, (20, 10))
        assert a.pairs + b.pairs == c.pairs
        with pytest.raises(DataError):
            split_corpus(c, (20, 11))


class TestCorpusFiles:
    def test_round_trip(self, tmp_path):
        c = gen_corpus("ambiguous-lexicon", 100, (5, 20), 60, 5)
        write_corpus(c, tmp_path / "train")
        assert read_corpus(tmp_path / "train").pairs == c.pairs

    def test_line_count_mismatch(self, tmp_path):
        (tmp_path / "x.src").write_text("a b\nc\n")
        (tmp_path / "x.tgt").write_text("a b\n")
        with pytest.raises(DataError, match="lines"):
            read_corpus(tmp_path / "x")

    def test_empty_side_and_missing_file(self, tmp_path):
        (tmp_path / "x.src").write_text("a b\n\n")
        (tmp_path / "x.tgt").write_text("a b\nc\n")
        with pytest.raises(DataError, match="empty"):
            read_corpus(tmp_path / "x")
        with pytest.raises(DataError, match="not found"):
            read_corpus(tmp_path / "nope")


class TestVocabulary:
    def test_three_tokens_give_seven_ids(self):
        v = build_vocab([["a", "b"], ["c", "a"]], 100)
        assert len(v) == 7
        assert v.itos[:4] == ["<pad>", "<unk>", "<s>", "</s>"]

    def test_unknown_maps_to_unk(self):
        v = build_vocab([["a"]], 10)
        assert v.encode(["a", "zzz"]) == [4, UNK]

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefgh"), min_size=1, max_size=6), min_size=1, max_size=10))
    def test_order_matches_counting_oracle(self, sents):
        counts = Counter(t for s in sents for t in s)
        expect = sorted(counts, key=lambda t: (-counts[t], t))[:5]
        assert build_vocab(sents, 9).itos[4:] == expect

    def test_decode_strips_framing(self):
        v = build_vocab([["a", "b"]], 10)
        assert v.decode([BOS, 4, 5, EOS, 4]) == ["a", "b"]
        assert v.decode([4, PAD], strip=False) == ["a", "<pad>"]

    def test_file_round_trip(self, tmp_path):
        v = build_vocab([["a", "b", "b"]], 10)
        v.save(tmp_path / "v.tsv")
        w = Vocabulary.load(tmp_path / "v.tsv")
        assert w == v and w.counts == v.counts

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            build_vocab([], 10)


@pytest.fixture(scope="module")
def setup():
    c = gen_corpus("ambiguous-lexicon", 1000, (5, 20), 60, 1)
    return c, build_vocab(c.sources, 100), build_vocab(c.targets, 100)


class TestBatching:
    def test_padding_fraction_below_30_percent(self, setup):
        c, sv, tv = setup
        batches = make_batches(c, sv, tv, 32, shuffle_seed=0)
        cells = sum(b.src.size for b in batches)
        pads = sum(int((b.src == PAD).sum()) for b in batches)
        assert pads / cells < 0.30

    def test_tokens_preserved(self, setup):
        c, sv, tv = setup
        batches = make_batches(c, sv, tv, 17, shuffle_seed=3)
        assert sum(int(b.src_len.sum()) for b in batches) == sum(len(s) for s in c.sources)
        assert sorted(int(i) for b in batches for i in b.index) == list(range(len(c)))

    def test_batch_size_one_has_no_padding(self, setup):
        c, sv, tv = setup
        for b in make_batches(c.subset(range(20)), sv, tv, 1):
            assert not (b.src == PAD).any()
            assert not (b.tgt_out == PAD).any()

    def test_framing_and_pad_only_past_length(self, setup):
        c, sv, tv = setup
        for b in make_batches(c.subset(range(64)), sv, tv, 16, shuffle_seed=1):
            for r in range(b.size):
                n = b.tgt_len[r]
                assert b.tgt_in[r, 0] == BOS and b.tgt_out[r, n - 1] == EOS
                assert (b.tgt_out[r, n:] == PAD).all() and (b.src[r, b.src_len[r] :] == PAD).all()
                assert (b.src[r, : b.src_len[r]] != PAD).all()
                np.testing.assert_array_equal(b.tgt_in[r, 1:n], b.tgt_out[r, : n - 1])

    def test_shuffle_is_seeded(self, setup):
        c, sv, tv = setup
        order = lambda s: [tuple(b.index) for b in make_batches(c, sv, tv, 32, shuffle_seed=s)]  # noqa: E731
        assert order(5) == order(5) != order(6)

    def test_invalid_batch_size(self, setup):
        c, sv, tv = setup
        with pytest.raises(DataError):
            make_batches(c, sv, tv, 0)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"enc.W": rng.normal(size=(3, 4)), "b": rng.normal(size=5), "s": np.array(2.5)}
        save_arrays(tmp_path / "p.bin", arrays)
        back = load_arrays(tmp_path / "p.bin")
        assert list(back) == list(arrays)
        for k in arrays:
            assert back[k].shape == arrays[k].shape
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_truncated_file_rejected(self, tmp_path):
        save_arrays(tmp_path / "p.bin", {"w": np.ones(10)})
        blob = (tmp_path / "p.bin").read_bytes()
        (tmp_path / "p.bin").write_bytes(blob[:-8])
        with pytest.raises(CheckpointError):
            load_arrays(tmp_path / "p.bin")

    def test_wrong_version_rejected(self, tmp_path):
        (tmp_path / "p.bin").write_bytes(b"\x09\x00\x00\x00\x00\x00\x00\x00")
        with pytest.raises(CheckpointError, match="version"):
            load_arrays(tmp_path / "p.bin")
