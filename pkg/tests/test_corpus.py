from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from milelab.corpus import (
    HIGH,
    LOW,
    MEDIUM,
    CorpusStats,
    DomainManifest,
    Vocab,
    build_frequency_buckets,
    chunk,
    compute_sampling_weights,
    generate_zipf_corpus,
    inputs_targets,
    read_token_stream,
    sample_domain,
    tokenize,
    write_bucket_report,
    write_token_stream,
)
from milelab.errors import InputError


class TestTokenize:
    def test_empty(self):
        assert tokenize("", Vocab.bytes()) == []

    def test_byte_length(self):
        text = "naïve café ✓"
        assert len(tokenize(text, Vocab.bytes())) == len(text.encode("utf-8"))

    def test_word_level_hand_mapping(self):
        vocab = Vocab.words(["the cat sat on the mat", "the dog"], max_size=4)
        # counts: the=3, then ties at 1 broken alphabetically: cat, dog
        assert vocab.id_to_str == ["<unk>", "the", "cat", "dog"]
        assert tokenize("the dog sat", vocab) == [1, 3, 0]


class TestZipf:
    def test_rank1_frequency(self):
        n, s = 512, 1.1
        toks = generate_zipf_corpus(1_000_000, n, s, seed=11)
        harmonic = sum(k ** -s for k in range(1, n + 1))
        expected = 1.0 / harmonic
        freq = np.mean(toks == 0)
        assert abs(freq - expected) <= 0.02 * expected

    def test_iid_rank1_frequency(self):
        toks = generate_zipf_corpus(200_000, 64, 1.1, seed=2, markov_order=0)
        expected = 1.0 / sum(k ** -1.1 for k in range(1, 65))
        assert abs(np.mean(toks == 0) - expected) <= 0.02 * expected

    def test_large_exponent_dominated_by_rank1(self):
        toks = generate_zipf_corpus(10_000, 50, 30.0, seed=0)
        assert np.mean(toks == 0) > 0.999

    def test_same_seed_identical(self):
        a = generate_zipf_corpus(5000, 100, 1.1, seed=3)
        b = generate_zipf_corpus(5000, 100, 1.1, seed=3)
        c = generate_zipf_corpus(5000, 100, 1.1, seed=4)
        assert np.array_equal(a, b) and not np.array_equal(a, c)

    def test_markov_structure_is_learnable(self):
        toks = generate_zipf_corpus(200_000, 64, 1.1, seed=5)
        same = np.mean(toks[1:] == toks[:-1])
        iid = generate_zipf_corpus(200_000, 64, 1.1, seed=5, markov_order=0)
        # the chain concentrates the successor distribution: bigram entropy drops
        def cond_entropy(x):
            joint = np.bincount(x[:-1] * 64 + x[1:], minlength=64 * 64).reshape(64, 64).astype(float)
            rows = joint.sum(axis=1, keepdims=True)
            p = np.divide(joint, rows, out=np.zeros_like(joint), where=rows > 0)
            with np.errstate(divide="ignore", invalid="ignore"):
                h = -np.nansum(p * np.log(p), axis=1)
            return float((rows.ravel() / rows.sum()) @ h)

        assert cond_entropy(toks) < cond_entropy(iid) - 0.1
        assert same > 0.05

    def test_bad_args(self):
        with pytest.raises(InputError):
            generate_zipf_corpus(10, 1, 1.1, seed=0)
        with pytest.raises(InputError):
            generate_zipf_corpus(10, 10, 0.0, seed=0)


def prefix_scan_oracle(counts, lo=Fraction(4, 5), hi=Fraction(19, 20)):
    """Smallest prefixes of the sorted order whose coverage reaches each target."""
    total = sum(counts)
    order = sorted(range(len(counts)), key=lambda i: (-counts[i], i))
    nonzero = [i for i in order if counts[i] > 0]

    def smallest_prefix(target):
        for k in range(1, len(nonzero) + 1):
            if Fraction(sum(counts[i] for i in nonzero[:k]), total) >= target:
                return k
        return len(nonzero)

    k1, k2 = smallest_prefix(lo), smallest_prefix(hi)
    labels = [LOW] * len(counts)
    for pos, tok in enumerate(nonzero):
        labels[tok] = HIGH if pos < k1 else MEDIUM if pos < k2 else LOW
    return labels


class TestBuckets:
    def test_exact_boundaries(self):
        b = build_frequency_buckets(CorpusStats([50, 30, 15, 5]))
        assert b.members("high") == [0, 1]
        assert b.members("medium") == [2]
        assert b.members("low") == [3]

    def test_single_token(self):
        b = build_frequency_buckets(CorpusStats([7]))
        assert b.members("high") == [0] and b.members("medium") == [] and b.members("low") == []

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            build_frequency_buckets(CorpusStats([0, 0, 0]))

    def test_ties_by_ascending_id(self):
        b = build_frequency_buckets(CorpusStats([10] * 10))
        assert b.members("high") == list(range(8))
        # 9 tokens cover 0.9 < 0.95, so the last one closes Medium and Low is empty
        assert b.members("medium") == [8, 9]
        assert b.members("low") == []

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_prefix_scan_oracle(self, seed):
        rng = np.random.default_rng(seed)
        counts = (rng.pareto(1.0, size=100) * 10).astype(int)
        counts[rng.random(100) < 0.1] = 0
        if counts.sum() == 0:
            counts[0] = 1
        got = build_frequency_buckets(CorpusStats(counts)).assignment.tolist()
        assert got == prefix_scan_oracle(counts.tolist())

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=60).filter(lambda c: sum(c) > 0),
           st.integers(1, 7))
    def test_properties(self, counts, scale):
        b = build_frequency_buckets(CorpusStats(counts))
        a = b.assignment
        counts = np.asarray(counts)
        total = counts.sum()
        # zero-count tokens are Low; labels are non-decreasing along the sorted order
        assert np.all(a[counts == 0] == LOW)
        assert np.all(np.diff(a[b.order]) >= 0)
        high = counts[a == HIGH]
        assert Fraction(int(high.sum()), int(total)) >= Fraction(4, 5)
        assert Fraction(int(high.sum() - high.min()), int(total)) < Fraction(4, 5)
        hm = counts[a <= MEDIUM]
        assert Fraction(int(hm.sum()), int(total)) >= Fraction(19, 20)
        assert Fraction(int(hm.sum() - counts[b.order[np.sum(a <= MEDIUM) - 1]]), int(total)) < Fraction(19, 20)
        scaled = build_frequency_buckets(CorpusStats(counts * scale))
        assert np.array_equal(scaled.assignment, a)

    def test_report_csv(self, tmp_path):
        stats = CorpusStats([50, 30, 15, 5])
        path = tmp_path / "b.csv"
        write_bucket_report(path, stats, build_frequency_buckets(stats))
        lines = path.read_text().splitlines()
        assert lines[0] == "token_id,surface,count,frequency,cum_frequency,bucket"
        assert lines[1] == "0,0,50,0.5,0.5,high"
        assert lines[-1].endswith(",1.0,low")

    def test_round_trip_dict(self):
        b = build_frequency_buckets(CorpusStats([5, 9, 1, 0, 3]))
        again = type(b).from_dict(b.to_dict())
        assert np.array_equal(again.assignment, b.assignment) and np.array_equal(again.order, b.order)


class TestChunk:
    def test_drop_tail(self):
        out = chunk(np.arange(10), 4)
        assert out.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]

    def test_short_stream(self):
        assert chunk(np.arange(3), 4).shape == (0, 4)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 300), st.integers(2, 40))
    def test_lossless_prefix(self, n, t):
        toks = np.arange(n)
        out = chunk(toks, t)
        assert len(out) == n // t
        assert np.array_equal(out.ravel(), toks[: len(out) * t])

    def test_inputs_targets(self):
        x, y = inputs_targets(chunk(np.arange(8), 4))
        assert x.tolist() == [[0, 1, 2], [4, 5, 6]] and y.tolist() == [[1, 2, 3], [5, 6, 7]]

    def test_seq_len_too_small(self):
        with pytest.raises(InputError):
            chunk(np.arange(5), 1)


class TestWeights:
    def test_two_domains(self):
        w = compute_sampling_weights(DomainManifest.from_lists(["a", "b"], [100, 50], [2.0, 1.0]))
        assert w == pytest.approx([0.8, 0.2], abs=1e-12)

    def test_single(self):
        assert compute_sampling_weights(DomainManifest.from_lists(["a"], [3], [1.5])) == [1.0]

    def test_all_zero(self):
        with pytest.raises(InputError):
            compute_sampling_weights(DomainManifest.from_lists(["a", "b"], [0, 0], [1.0, 2.0]))

    def test_22_domains_exact_fraction_oracle(self):
        rng = np.random.default_rng(22)
        counts = rng.integers(0, 10**7, size=22).tolist()
        epochs = np.round(rng.uniform(0.5, 3.0, size=22), 3).tolist()
        w = compute_sampling_weights(DomainManifest.from_lists([f"d{i}" for i in range(22)], counts, epochs))
        prods = [Fraction(c) * Fraction(e) for c, e in zip(counts, epochs)]
        total = sum(prods)
        for got, p in zip(w, prods):
            assert abs(got - float(p / total)) <= 1e-12
        assert abs(sum(w) - 1.0) <= 1e-12

    def test_epoch_scale_invariance(self):
        m1 = DomainManifest.from_lists("abc", [10, 20, 30], [1.0, 2.0, 0.5])
        m2 = DomainManifest.from_lists("abc", [10, 20, 30], [3.0, 6.0, 1.5])
        np.testing.assert_allclose(compute_sampling_weights(m1), compute_sampling_weights(m2), rtol=0, atol=1e-15)

    def test_bad_manifest(self):
        with pytest.raises(InputError):
            DomainManifest.from_lists(["a"], [5], [0.0])


class TestSampleDomain:
    def test_single(self):
        rng = np.random.default_rng(0)
        assert all(sample_domain([1.0], rng) == 0 for _ in range(100))

    def test_balanced(self):
        idx = sample_domain([0.5, 0.5], np.random.default_rng(1), size=1_000_000)
        freq = np.bincount(idx, minlength=2) / idx.size
        assert np.all(np.abs(freq - 0.5) <= 0.002)

    def test_zero_weight_never_drawn(self):
        idx = sample_domain([0.3, 0.0, 0.7], np.random.default_rng(2), size=100_000)
        assert not np.any(idx == 1)

    def test_deterministic(self):
        a = sample_domain([0.2, 0.8], np.random.default_rng(5), size=50)
        b = sample_domain([0.2, 0.8], np.random.default_rng(5), size=50)
        assert np.array_equal(a, b)


class TestTokenStream:
    def test_round_trip(self, tmp_path):
        toks = np.array([0, 1, 511, 2**32 - 1])
        path = tmp_path / "t.milt"
        write_token_stream(path, toks)
        raw = path.read_bytes()
        assert raw[:5] == b"MILT1" and len(raw) == 5 + 16
        assert np.array_equal(read_token_stream(path), toks)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "t.milt"
        path.write_bytes(b"XXXXX\0\0\0\0")
        with pytest.raises(InputError):
            read_token_stream(path)
