import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import pkt
from reference import brute_score, brute_t_max, byte_freqs, two_pass_stats
from fpfilter.oad import (ClassModel, ModelFormatError, OadConfig, OadModel, SomGrid, default_threshold,
                          histogram, load_model, oad_score, oad_train, payl_update, save_model, som_classify,
                          som_init, som_train)


def out(payload: bytes, port: int = 80, ts: float = 0.0):
    return pkt(f"172.16.0.1:{port}", "10.0.0.2:4321", payload, ts)


class TestHistogram:
    def test_empty(self):
        assert not histogram(b"").any()

    def test_single_byte(self):
        h = histogram(b"aaa")
        assert h[0x61] == 1.0 and h.sum() == 1.0

    def test_two_bytes(self):
        h = histogram(b"ab")
        assert h[0x61] == 0.5 and h[0x62] == 0.5
        assert np.count_nonzero(h) == 2

    @given(st.binary(min_size=1, max_size=500), st.randoms(use_true_random=False))
    def test_sums_to_one_and_permutation_invariant(self, payload, rnd):
        h = histogram(payload)
        assert abs(h.sum() - 1.0) <= 1e-12
        assert np.all((h >= 0) & (h <= 1))
        shuffled = bytearray(payload)
        rnd.shuffle(shuffled)
        assert np.array_equal(histogram(bytes(shuffled)), h)


class TestSom:
    def test_single_node(self):
        g = som_init(1, 1, 5)
        assert g.weights.shape == (1, 256)
        assert np.all((g.weights >= 0) & (g.weights <= 1))

    def test_deterministic(self):
        assert np.array_equal(som_init(4, 4, 42).weights, som_init(4, 4, 42).weights)

    def test_seed_matters(self):
        assert not np.array_equal(som_init(4, 4, 42).weights, som_init(4, 4, 43).weights)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            som_init(0, 3, 1)

    def test_classify_single_node(self):
        assert som_classify(som_init(1, 1, 0), histogram(b"xyz")) == 0

    def test_classify_exact_match(self):
        g = SomGrid(2, 1, np.stack([np.zeros(256), np.ones(256)]))
        assert som_classify(g, np.zeros(256)) == 0

    def test_classify_tie_lowest_index(self):
        g = SomGrid(3, 1, np.stack([np.ones(256), np.zeros(256), np.zeros(256)]))
        h = np.full(256, 0.5)
        assert som_classify(g, h) == 0
        g2 = SomGrid(3, 1, np.stack([np.full(256, 9.0), np.zeros(256), np.ones(256)]))
        assert som_classify(g2, h) == 1

    @settings(max_examples=30)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**63 - 1))
    def test_classify_own_weights(self, w, h, seed):
        g = som_init(w, h, seed)
        for j in range(g.n_nodes):
            assert som_classify(g, g.weights[j]) == j

    def test_full_rate_pull(self):
        g = som_init(1, 1, 3, epochs=1, eta0=1.0)
        x = histogram(b"hello")
        trained = som_train(g, [x])
        assert np.allclose(trained.weights[0], x, atol=1e-15)
        assert not np.array_equal(g.weights[0], trained.weights[0])  # input untouched

    def test_training_deterministic(self):
        xs = [histogram(bytes([i, i + 1, 7])) for i in range(20)]
        a = som_train(som_init(3, 2, 9), xs)
        b = som_train(som_init(3, 2, 9), xs)
        assert np.array_equal(a.weights, b.weights)

    def test_empty_samples(self):
        with pytest.raises(ValueError):
            som_train(som_init(2, 2, 0), [])

    def test_separates_two_clusters(self):
        rng = np.random.default_rng(0)
        low = [histogram(bytes(rng.integers(0x30, 0x3A, 100, dtype=np.uint8))) for _ in range(30)]
        high = [histogram(bytes(rng.integers(0x61, 0x7B, 100, dtype=np.uint8))) for _ in range(30)]
        g = som_train(som_init(2, 1, 11), low + high)
        low_nodes = {som_classify(g, h) for h in low}
        high_nodes = {som_classify(g, h) for h in high}
        assert len(low_nodes) == 1 and len(high_nodes) == 1
        assert low_nodes != high_nodes


class TestPaylUpdate:
    def test_first_sample(self):
        m = payl_update(ClassModel((80, 0)), histogram(b"a"))
        assert m.n == 1 and m.mean[0x61] == 1.0 and not m.m2.any()

    def test_identical_samples(self):
        m = ClassModel((80, 0))
        for _ in range(2):
            payl_update(m, histogram(b"ab"))
        assert m.mean[0x61] == 0.5 and m.stddev[0x61] == 0.0

    def test_two_step_by_hand(self):
        # mean 0.5; deviations +-0.5 -> m2 = 0.25 + 0.25; population stddev sqrt(0.5 / 2)
        m = ClassModel((80, 0))
        payl_update(m, histogram(b"aa"))
        payl_update(m, histogram(b"bb"))
        assert m.mean[0x61] == 0.5
        assert m.m2[0x61] == 0.5
        assert m.stddev[0x61] == 0.5

    @settings(max_examples=25, deadline=None)
    @given(st.lists(st.binary(min_size=1, max_size=40), min_size=1, max_size=200))
    def test_matches_two_pass(self, payloads):
        m = ClassModel((80, 0))
        rows = [byte_freqs(p) for p in payloads]
        for p in payloads:
            payl_update(m, histogram(p))
        mean, std = two_pass_stats(rows)
        assert np.max(np.abs(m.mean - mean)) <= 1e-9
        assert np.max(np.abs(m.stddev - std)) <= 1e-9


class TestTrainAndScore:
    def test_identical_corpus(self):
        model = oad_train([out(b"same payload") for _ in range(10)])
        assert model.t_max == 0.0
        assert all(not m.stddev.any() for m in model.classes.values())
        assert model.trained_count == 10

    def test_single_packet(self):
        model = oad_train([out(b"only one")])
        assert len(model.classes) == 1
        (m,) = model.classes.values()
        assert m.n == 1 and model.t_max == 0.0

    def test_empty_input(self):
        with pytest.raises(ValueError):
            oad_train([])
        with pytest.raises(ValueError):
            oad_train([out(b"")])

    def test_two_class_corpus_t_max_brute_force(self):
        packets = [out(b"ab" * k) for k in range(1, 6)] + [out(b"cd" * k + b"c") for k in range(1, 6)]
        model = oad_train(packets, OadConfig(width=2, height=1, seed=1))
        assert len(model.classes) == 2
        expected = brute_t_max(packets, lambda p: som_classify(model.som, histogram(p.payload)), 0.001)
        assert model.t_max == pytest.approx(expected, rel=1e-12, abs=1e-12)
        assert model.t_max > 0
        assert all(oad_score(model, p) <= model.t_max for p in packets)

    def test_score_zero_on_own_payload(self):
        model = oad_train([out(b"exact")])
        assert oad_score(model, out(b"exact")) == 0.0

    def test_score_hand_computed(self):
        m = ClassModel((80, 0), alpha=0.001)
        payl_update(m, histogram(b"ab"))
        model = OadModel(som_init(1, 1, 0), {(80, 0): m}, 0.0, 1)
        assert oad_score(model, out(b"aa")) == pytest.approx(1000.0, abs=1e-9)
        assert brute_score(b"aa", m.mean.tolist(), m.stddev.tolist(), 0.001) == pytest.approx(1000.0, abs=1e-9)

    def test_unseen_key_is_infinite(self):
        model = oad_train([out(b"abc", port=80)])
        assert oad_score(model, out(b"abc", port=8080)) == math.inf

    def test_empty_payload_rejected(self):
        model = oad_train([out(b"abc")])
        with pytest.raises(ValueError):
            oad_score(model, out(b""))

    @settings(max_examples=20, deadline=None)
    @given(st.lists(st.binary(min_size=1, max_size=30), min_size=1, max_size=30),
           st.binary(min_size=1, max_size=30))
    def test_scores_nonnegative_and_bounded_by_t_max(self, payloads, probe):
        packets = [out(p) for p in payloads]
        model = oad_train(packets, OadConfig(width=2, height=2, epochs=1))
        assert model.t_max >= 0
        assert all(oad_score(model, p) <= model.t_max for p in packets)
        assert oad_score(model, out(probe)) >= 0
        assert default_threshold(model) == 0.75 * model.t_max


@pytest.mark.parametrize("t_max,expected", [(4.0, 3.0), (0.0, 0.0), (1.0, 0.75)])
def test_default_threshold(t_max, expected):
    model = OadModel(som_init(1, 1, 0), {}, t_max, 0)
    assert default_threshold(model) == expected


class TestPersistence:
    def _two_class(self):
        packets = [out(b"ab" * k) for k in range(1, 6)] + [out(b"cd" * k + b"c") for k in range(1, 6)]
        return oad_train(packets, OadConfig(width=2, height=1, seed=1)), packets

    def test_round_trip_one_class(self):
        model = oad_train([out(b"hello"), out(b"help")], OadConfig(width=1, height=1))
        buf = io.BytesIO()
        save_model(model, buf)
        buf.seek(0)
        back = load_model(buf)
        assert back.t_max == model.t_max
        assert oad_score(back, out(b"hell")) == oad_score(model, out(b"hell"))

    def test_round_trip_bit_exact(self):
        model, packets = self._two_class()
        buf = io.BytesIO()
        save_model(model, buf)
        back = load_model(io.BytesIO(buf.getvalue()))
        probes = packets + [out(b"zzz"), out(b"abcd"), out(b"abab", port=81)]
        for p in probes:
            a, b = oad_score(model, p), oad_score(back, p)
            assert a == b or (math.isinf(a) and math.isinf(b))
        assert np.array_equal(back.som.weights, model.som.weights)
        again = io.BytesIO()
        save_model(back, again)
        assert again.getvalue() == buf.getvalue()

    def test_header(self):
        model, _ = self._two_class()
        buf = io.BytesIO()
        save_model(model, buf)
        assert buf.getvalue()[:16] == b"APHRODITE-OAD\x00\x00\x01"

    def test_bad_magic(self):
        with pytest.raises(ModelFormatError, match="magic"):
            load_model(io.BytesIO(b"NOT-A-MODEL-FILE{}"))

    def test_version_mismatch(self):
        model, _ = self._two_class()
        buf = io.BytesIO()
        save_model(model, buf)
        data = bytearray(buf.getvalue())
        data[15] = 2
        with pytest.raises(ModelFormatError, match="version"):
            load_model(io.BytesIO(bytes(data)))

    def test_truncated(self):
        model, _ = self._two_class()
        buf = io.BytesIO()
        save_model(model, buf)
        with pytest.raises(ModelFormatError, match="truncated"):
            load_model(io.BytesIO(buf.getvalue()[:-50]))
        with pytest.raises(ModelFormatError):
            load_model(io.BytesIO(buf.getvalue()[:10]))

    def test_training_bit_identical_files(self):
        packets = [out(bytes([i % 7 + 60]) * (i + 3)) for i in range(40)]
        files = []
        for _ in range(2):
            buf = io.BytesIO()
            save_model(oad_train(packets, OadConfig(width=3, height=3, seed=5)), buf)
            files.append(buf.getvalue())
        assert files[0] == files[1]
