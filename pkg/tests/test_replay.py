"""Replay memory: class-balanced reservoir behavior and bit accounting."""

import numpy as np
import pytest
from scipy import stats

from binreplay.bitpack import pack
from binreplay.replay import (
    LatentSample,
    ReplayError,
    ReplayMemory,
    memory_footprint_bits,
    sample_minibatch,
    update_after_experience,
)


def make_sample(label, rng, shape=(4,)):
    return LatentSample(activation=pack(rng.choice([-1, 1], size=shape)), label=label)


class TestReservoirUpdate:
    def test_fills_up_to_quota(self, rng):
        mem = ReplayMemory(quota=5, max_classes=3)
        update_after_experience(mem, [make_sample(0, rng) for _ in range(3)], rng)
        assert len(mem.per_class[0]) == 3
        update_after_experience(mem, [make_sample(0, rng) for _ in range(10)], rng)
        assert len(mem.per_class[0]) == 5
        assert mem.seen_counts[0] == 13

    def test_six_experience_stream_exact_buckets(self, rng):
        # 6 experiences x 100 samples/class, quota 30: every bucket lands at 30
        mem = ReplayMemory(quota=30, max_classes=4)
        for _ in range(6):
            batch = [make_sample(c, rng) for c in range(4) for _ in range(100)]
            update_after_experience(mem, batch, rng)
        for c in range(4):
            assert len(mem.per_class[c]) == 30
            assert mem.seen_counts[c] == 600

    def test_absent_classes_untouched(self, rng):
        mem = ReplayMemory(quota=3, max_classes=3)
        update_after_experience(mem, [make_sample(0, rng) for _ in range(3)], rng)
        kept = list(mem.per_class[0])
        update_after_experience(mem, [make_sample(1, rng) for _ in range(3)], rng)
        assert mem.per_class[0] == kept

    def test_inclusion_uniform_over_stream(self):
        # chi-square over which stream elements survive: Algorithm R keeps
        # each of the 200 elements with equal probability 30/200
        n_stream, quota, trials = 200, 30, 10_000
        act = pack(np.ones(2))
        counts = np.zeros(n_stream)
        for t in range(trials):
            rng = np.random.default_rng(t)
            mem = ReplayMemory(quota=quota, max_classes=1)
            stream = [LatentSample(activation=act, label=0) for _ in range(n_stream)]
            # two experiences of 100 to mirror a continual stream
            update_after_experience(mem, stream[:100], rng)
            update_after_experience(mem, stream[100:], rng)
            survivors = {id(s) for s in mem.per_class[0]}
            for i, s in enumerate(stream):
                if id(s) in survivors:
                    counts[i] += 1
        expected = trials * quota / n_stream
        chi2 = float(np.sum((counts - expected) ** 2 / expected))
        p = 1.0 - stats.chi2.cdf(chi2, df=n_stream - 1)
        assert p > 0.01

    def test_label_out_of_range(self, rng):
        mem = ReplayMemory(quota=2, max_classes=2)
        with pytest.raises(ReplayError):
            update_after_experience(mem, [make_sample(5, rng)], rng)

    def test_shape_mismatch_rejected(self, rng):
        mem = ReplayMemory(quota=2, max_classes=2)
        update_after_experience(mem, [make_sample(0, rng, shape=(4,))], rng)
        with pytest.raises(ReplayError):
            update_after_experience(mem, [make_sample(1, rng, shape=(5,))], rng)

    def test_invalid_quota(self):
        with pytest.raises(ReplayError):
            ReplayMemory(quota=0, max_classes=1)


class TestSampleMinibatch:
    def _filled(self, rng, classes=4, per_class=10):
        mem = ReplayMemory(quota=per_class, max_classes=classes)
        batch = [make_sample(c, rng) for c in range(classes) for _ in range(per_class)]
        update_after_experience(mem, batch, rng)
        return mem

    def test_class_balanced(self, rng):
        mem = self._filled(rng)
        drawn = sample_minibatch(mem, 64, rng)
        labels = [s.label for s in drawn]
        counts = {c: labels.count(c) for c in range(4)}
        assert all(v == 16 for v in counts.values())

    def test_uneven_batch_within_one(self, rng):
        mem = self._filled(rng, classes=3)
        labels = [s.label for s in sample_minibatch(mem, 10, rng)]
        counts = [labels.count(c) for c in range(3)]
        assert max(counts) - min(counts) <= 1

    def test_no_duplicates_until_bucket_exhausted(self, rng):
        mem = self._filled(rng, classes=2, per_class=10)
        drawn = sample_minibatch(mem, 20, rng)  # 10 per class: exactly one epoch
        per_class_ids = {0: set(), 1: set()}
        for s in drawn:
            per_class_ids[s.label].add(id(s))
        assert len(per_class_ids[0]) == 10 and len(per_class_ids[1]) == 10

    def test_deterministic_given_rng(self, rng):
        mem = self._filled(rng)
        a = sample_minibatch(mem, 16, np.random.default_rng(9))
        b = sample_minibatch(mem, 16, np.random.default_rng(9))
        assert [id(s) for s in a] == [id(s) for s in b]

    def test_empty_memory_rejected(self, rng):
        with pytest.raises(ReplayError):
            sample_minibatch(ReplayMemory(quota=2, max_classes=2), 4, rng)

    def test_nonpositive_draw_rejected(self, rng):
        with pytest.raises(ReplayError):
            sample_minibatch(self._filled(rng), 0, rng)


class TestFootprint:
    def test_bit_accounting(self, rng):
        mem = ReplayMemory(quota=4, max_classes=3)
        batch = [make_sample(c, rng, shape=(3, 5)) for c in range(2) for _ in range(4)]
        update_after_experience(mem, batch, rng)
        fp = memory_footprint_bits(mem)
        elements = 8 * 15  # 8 samples x 15 elements
        assert fp.payload_bits == elements
        assert fp.float32_bits == 32 * elements
        assert fp.float32_bits == 32 * fp.payload_bits  # exact 32x reduction
        assert fp.bookkeeping_bits == 16 * 8 + 64 * 2

    def test_empty_memory(self):
        fp = memory_footprint_bits(ReplayMemory(quota=2, max_classes=2))
        assert fp.payload_bits == 0 and fp.float32_bits == 0
