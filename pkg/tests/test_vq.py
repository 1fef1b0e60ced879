import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rdvq import gradcore as G
from rdvq import vq
from rdvq.gradcore import DimensionError, Parameter


def book(entries):
    return vq.Codebook(Parameter(np.asarray(entries, dtype=np.float64), "codebook"))


@pytest.fixture
def rand_book():
    return book(np.random.default_rng(0).normal(size=(16, 4)))


class TestCodebook:
    def test_init_unique_and_bounded(self):
        cb = vq.init_codebook(64, 8, np.random.default_rng(0))
        e = cb.entries.value
        assert e.shape == (64, 8)
        assert np.abs(e).max() <= 1 / 64
        d = np.sqrt(((e[:, None] - e[None]) ** 2).sum(-1)) + np.eye(64)
        assert d.min() > 0

    def test_freeze(self, rand_book):
        rand_book.freeze()
        assert rand_book.frozen
        rand_book.unfreeze()
        assert not rand_book.frozen


class TestHard:
    def test_exact_match(self, rand_book):
        y = rand_book.entries.value[5][None, None]
        h = vq.assign_hard(y, rand_book)
        assert h.y_ind[0, 0] == 5
        assert h.distances[0, 0, 5] == pytest.approx(0.0, abs=1e-12)

    def test_tie_goes_to_lowest_index(self):
        e = np.zeros((8, 2))
        e[2] = [1.0, 0.0]
        e[7] = [-1.0, 0.0]
        e[[0, 1, 3, 4, 5, 6]] = 10.0 + np.arange(6)[:, None]
        h = vq.assign_hard(np.zeros((1, 1, 2)), book(e))
        assert h.y_ind[0, 0] == 2

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(1)
        cb = book(rng.normal(size=(16, 3)))
        y = rng.normal(size=(1, 100, 3))
        h = vq.assign_hard(y, cb)
        for t in range(100):
            dists = [np.sum((y[0, t] - c) ** 2) for c in cb.entries.value]
            assert h.y_ind[0, t] == min(range(16), key=lambda k: (dists[k], k))

    def test_codewords_exact(self, rand_book):
        y = np.random.default_rng(2).normal(size=(2, 5, 4))
        h = vq.assign_hard(y, rand_book)
        np.testing.assert_array_equal(h.y_q.value, rand_book.entries.value[h.y_ind])

    def test_straight_through(self, rand_book):
        y = Parameter(np.random.default_rng(3).normal(size=(1, 3, 4)), "y")
        w = np.random.default_rng(4).normal(size=(1, 3, 4))
        g = G.backward(G.sum(G.mul(vq.assign_hard(y, rand_book).y_q, w)), [y])["y"]
        np.testing.assert_array_equal(g, w)

    def test_dimension_mismatch(self, rand_book):
        with pytest.raises(DimensionError):
            vq.assign_hard(np.zeros((1, 2, 5)), rand_book)


class TestSoft:
    def test_hand_evaluated(self):
        # codewords placed so that squared distances from the origin are 0, 1, 2
        cb = book([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]])
        p = vq.soft_distribution(np.zeros((1, 1, 2)), cb, 1.0).p_soft.value[0, 0]
        np.testing.assert_allclose(p, [0.6652, 0.2447, 0.0900], atol=1e-4)

    def test_equidistant_uniform(self):
        cb = book([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        p = vq.soft_distribution(np.zeros((1, 1, 2)), cb, 0.3).p_soft.value
        np.testing.assert_allclose(p, 0.25, atol=1e-12)

    def test_low_temperature_is_one_hot(self, rand_book):
        y = np.random.default_rng(5).normal(size=(2, 6, 4))
        h = vq.assign_hard(y, rand_book)
        p = vq.soft_distribution(y, rand_book, 1e-6).p_soft.value
        onehot = np.eye(16)[h.y_ind]
        assert np.abs(p - onehot).max() < 1e-6

    @pytest.mark.parametrize("tau", [0.0, -1.0])
    def test_bad_tau(self, rand_book, tau):
        with pytest.raises(ValueError):
            vq.soft_distribution(np.zeros((1, 1, 4)), rand_book, tau)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.sampled_from([10.0, 1.0, 0.1, 0.01, 1e-4]))
    def test_rows_and_argmax(self, seed, tau):
        rng = np.random.default_rng(seed)
        cb = book(rng.normal(size=(8, 3)))
        y = rng.normal(size=(2, 5, 3))
        p = vq.soft_distribution(y, cb, tau).p_soft.value
        np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-9)
        assert (p >= 0).all()
        np.testing.assert_array_equal(p.argmax(-1), vq.assign_hard(y, cb).y_ind)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6))
    def test_monotone_sharpening(self, seed):
        rng = np.random.default_rng(seed)
        cb = book(rng.normal(size=(8, 3)))
        y = rng.normal(size=(1, 6, 3))
        idx = vq.assign_hard(y, cb).y_ind[..., None]
        prev = None
        for tau in (10.0, 1.0, 0.1, 0.01):
            cur = np.take_along_axis(vq.soft_distribution(y, cb, tau).p_soft.value, idx, -1)
            if prev is not None:
                assert (cur >= prev - 1e-12).all()
            prev = cur

    def test_distances_non_negative(self):
        cb = book(np.full((3, 2), 1e8))
        d = vq.squared_distances(np.full((1, 1, 2), 1e8), cb).value
        assert (d >= 0).all()


class TestCodebookLoss:
    def test_zero_on_codewords(self, rand_book):
        y = rand_book.entries.value[[1, 4, 9]][None]
        h = vq.assign_hard(y, rand_book)
        assert vq.codebook_loss(y, h).item() == 0.0

    def test_hand_value(self):
        cb = book([[0.0, 0.0], [10.0, 10.0]])
        y = np.array([[[1.0, 0.0]]])
        assert vq.codebook_loss(y, vq.assign_hard(y, cb), 0.25).item() == pytest.approx(1.25)

    def test_gradient_is_commitment_only(self, rand_book):
        y = Parameter(np.random.default_rng(6).normal(size=(1, 4, 4)), "y")
        h = vq.assign_hard(y, rand_book)
        g = G.backward(vq.codebook_loss(y, h, 0.25), [y])["y"]
        expected = 2 * 0.25 * (y.value - h.y_q.value) / 4
        np.testing.assert_allclose(g, expected, rtol=1e-12)

        # finite differences of the commitment term alone, codewords held fixed
        c = h.y_q.value.copy()
        commit = lambda v: 0.25 * np.sum((v - c) ** 2) / 4
        fd = np.zeros_like(y.value)
        for i in np.ndindex(y.shape):
            e = np.zeros_like(y.value)
            e[i] = 1e-5
            fd[i] = (commit(y.value + e) - commit(y.value - e)) / 2e-5
        np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-12)

    def test_codebook_receives_gradient(self, rand_book):
        y = np.random.default_rng(7).normal(size=(1, 4, 4))
        h = vq.assign_hard(y, rand_book)
        g = G.backward(vq.codebook_loss(y, h), [rand_book.entries])["codebook"]
        assert g[h.y_ind[0]].any()
        unused = np.setdiff1d(np.arange(16), h.y_ind)
        assert not g[unused].any()


class TestUsage:
    def test_single_code(self):
        counts, ent = vq.usage_histogram(np.full(50, 3), 8)
        assert counts.sum() == 50 and counts[3] == 50
        assert ent == 0.0

    def test_uniform(self):
        _, ent = vq.usage_histogram(np.arange(64).repeat(3), 64)
        assert ent == pytest.approx(1.0)

    def test_empty(self):
        counts, ent = vq.usage_histogram(np.array([], dtype=int), 4)
        assert counts.tolist() == [0, 0, 0, 0] and ent == 0.0
