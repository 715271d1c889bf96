import itertools
import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semaim import ordergen as og
from semaim.errors import ContractError, NumericError


def min_distinct_distance_gap(h, w):
    """Enumerate every patch-to-center distance on an h x w grid."""
    dists = set()
    for cy, cx, i, j in itertools.product(range(h), range(w), range(h), range(w)):
        dists.add(math.sqrt((cy - i) ** 2 + (cx - j) ** 2))
    ordered = sorted(dists)
    return min((b - a for a, b in zip(ordered, ordered[1:])), default=math.inf)


class TestSimilarityMap:
    def test_identical_tokens_uniform(self):
        z = np.array([0.5, -1.0, 2.0])
        s = og.similarity_map(z, np.tile(z, (9, 1)))
        np.testing.assert_allclose(s.values, np.full((3, 3), 1 / 9), atol=1e-15)

    def test_two_patch_example(self):
        s = og.similarity_map([1.0, 0.0], [[1.0, 0.0], [0.0, 1.0]], grid=(1, 2))
        np.testing.assert_allclose(s.flat, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-12)

    def test_sums_to_one_and_scale_invariant(self):
        rng = np.random.default_rng(0)
        z_cls, z = rng.normal(size=8), rng.normal(size=(16, 8))
        s = og.similarity_map(z_cls, z)
        assert s.values.sum() == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(og.similarity_map(3.5 * z_cls, 3.5 * z).values, s.values, atol=1e-12)

    def test_zero_norm_names_index(self):
        z = np.ones((4, 2))
        z[2] = 0
        with pytest.raises(NumericError, match="index 2"):
            og.similarity_map([1.0, 0.0], z)


class TestMeanFilter:
    def test_uniform_map_attenuates_border(self):
        s = og.mean_filter_3x3(og.SimilarityMap(np.ones((4, 4))))
        counts = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]]) / 9
        np.testing.assert_allclose(s.values, counts, atol=1e-15)

    def test_hand_convolution(self):
        grid = np.full((3, 3), 0.1)
        grid[1, 1] = 0.2
        f = og.mean_filter_3x3(og.SimilarityMap(grid)).values
        assert f[1, 1] == pytest.approx(1.0 / 9, abs=1e-12)
        assert f[0, 1] == pytest.approx(0.7 / 9, abs=1e-12)
        assert f[0, 0] == pytest.approx(0.5 / 9, abs=1e-12)
        assert og.find_center(og.SimilarityMap(f)) == (1, 1)

    def test_impulse_response(self):
        grid = np.zeros((7, 7))
        grid[3, 4] = 1.0
        f = og.mean_filter_3x3(og.SimilarityMap(grid)).values
        expected = np.zeros((7, 7))
        expected[2:5, 3:6] = 1 / 9
        np.testing.assert_allclose(f, expected, atol=1e-15)


class TestCenter:
    def test_unique_max(self):
        v = np.zeros((5, 5))
        v[2, 3] = 1
        assert og.find_center(og.SimilarityMap(v)) == (2, 3)

    def test_constant_tie_break(self):
        assert og.find_center(og.SimilarityMap(np.ones((4, 3)))) == (0, 0)

    @pytest.mark.parametrize("i,j", [(1, 1), (3, 4), (5, 2)])
    def test_isolated_bright_cell(self, i, j):
        v = np.zeros((7, 7))
        v[i, j] = 1.0
        assert og.find_center(og.mean_filter_3x3(og.SimilarityMap(v))) == (i - 1, j - 1)


class TestDistance:
    def test_corner(self):
        np.testing.assert_allclose(og.distance_map((0, 0), (2, 2)), [[0, 1], [1, math.sqrt(2)]], atol=1e-15)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            cy, cx = rng.integers(0, 7, size=2)
            d = og.distance_map((cy, cx), (7, 7))
            assert d[cy, cx] == 0
            for i in range(7):
                for j in range(7):
                    assert d[i, j] == math.sqrt((cy - i) ** 2 + (cx - j) ** 2)

    def test_outside_grid(self):
        with pytest.raises(ContractError):
            og.distance_map((2, 0), (2, 2))


class TestCenterness:
    def test_lambda_zero_is_distance(self):
        d = og.distance_map((1, 2), (4, 4))
        c = og.centerness(d, np.random.default_rng(0), lam=0.0)
        np.testing.assert_array_equal(c.values, d.reshape(-1))

    def test_distinct_with_noise(self):
        d = og.distance_map((3, 3), (7, 7))
        c = og.centerness(d, np.random.default_rng(0))
        assert np.unique(c.values).size == 49
        assert c.lam == og.DEFAULT_LAMBDA == 0.01

    @pytest.mark.parametrize("side", [2, 5, 9, 14])
    def test_gap_exceeds_lambda(self, side):
        assert min_distinct_distance_gap(side, side) > 0.01


class TestPermutation:
    def test_small(self):
        p = og.permutation_from_centerness(og.Centerness(np.array([0.3, 0.1, 0.2])))
        assert p.order.tolist() == [1, 2, 0]

    def test_sorted_is_identity(self):
        assert og.permutation_from_centerness(np.arange(5.0)).order.tolist() == list(range(5))

    def test_matches_selection_sort(self):
        c = np.random.default_rng(5).random(196)
        remaining = list(range(196))
        expected = []
        while remaining:
            best = min(remaining, key=lambda k: c[k])
            expected.append(best)
            remaining.remove(best)
        assert og.permutation_from_centerness(c).order.tolist() == expected

    def test_duplicates_rejected(self):
        with pytest.raises(ContractError):
            og.permutation_from_centerness(np.array([0.1, 0.1, 0.2]))

    def test_invalid_permutation(self):
        with pytest.raises(ContractError):
            og.Permutation(np.array([0, 0, 2]))


class TestOrders:
    @pytest.mark.parametrize("n", [1, 4, 196])
    def test_raster(self, n):
        assert og.raster_order(n).order.tolist() == list(range(n))

    def test_stochastic_single(self):
        assert og.stochastic_order(1, np.random.default_rng(0)).order.tolist() == [0]

    def test_stochastic_reproducible(self):
        a = og.stochastic_order(20, np.random.default_rng(9))
        b = og.stochastic_order(20, np.random.default_rng(9))
        np.testing.assert_array_equal(a.order, b.order)

    def test_stochastic_uniform(self):
        rng = np.random.default_rng(123)
        counts = Counter(tuple(og.stochastic_order(3, rng).order) for _ in range(100_000))
        assert len(counts) == 6
        for perm in itertools.permutations(range(3)):
            assert abs(counts[perm] / 100_000 - 1 / 6) < 0.01

    def test_similarity_descending(self):
        s = og.SimilarityMap(np.array([[0.4, 0.3], [0.2, 0.1]]))
        assert og.similarity_order(s, np.random.default_rng(0), lam=0.0).order.tolist() == [0, 1, 2, 3]

    def test_similarity_matches_naive_sort(self):
        v = np.random.default_rng(2).random(25)
        s = og.SimilarityMap((v / v.sum()).reshape(5, 5))
        expected = sorted(range(25), key=lambda k: -s.flat[k])
        assert og.similarity_order(s, np.random.default_rng(0), lam=0.0).order.tolist() == expected

    def test_similarity_uniform_is_noise_driven(self):
        s = og.SimilarityMap(np.full((2, 2), 0.25))
        seen = {tuple(og.similarity_order(s, np.random.default_rng(k)).order) for k in range(200)}
        assert len(seen) == 24

    def test_rank_inversion(self):
        assert og.centerness_for_order(og.Permutation(np.array([1, 2, 0]))).values.tolist() == [2, 0, 1]
        assert og.centerness_for_order(og.raster_order(4)).values.tolist() == [0, 1, 2, 3]

    def test_round_trip(self):
        rng = np.random.default_rng(11)
        for _ in range(1000):
            p = og.Permutation(rng.permutation(int(rng.integers(1, 30))))
            back = og.permutation_from_centerness(og.centerness_for_order(p))
            np.testing.assert_array_equal(back.order, p.order)

    def test_strategy_parse(self):
        assert og.OrderStrategy.parse("Semantic") is og.OrderStrategy.SEMANTIC
        with pytest.raises(ContractError, match="raster, stochastic, similarity, semantic"):
            og.OrderStrategy.parse("bogus")


class TestMasks:
    def test_encoder_small(self):
        m = og.encoder_mask(np.array([0.0, 1.0, 2.0]))
        assert m.kind == "encoder"
        assert m.allow.astype(int).tolist() == [[1, 0, 0], [1, 1, 0], [1, 1, 1]]

    def test_encoder_single(self):
        assert og.encoder_mask(np.array([0.5])).allow.tolist() == [[True]]

    def test_decoder_small(self):
        m = og.decoder_mask(np.array([0.0, 1.0, 2.0]))
        assert m.kind == "decoder"
        assert m.allow.astype(int).tolist() == [[0, 0, 0], [1, 0, 0], [1, 1, 0]]
        assert not m.allow[0].any()

    def test_with_cls(self):
        m = og.encoder_mask(np.array([1.0, 0.0]), include_cls=True).allow
        assert m[0].tolist() == [True, False, False]
        assert m[:, 0].all()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_pairwise_exclusive_and_decoder_is_strict_encoder(self, n, seed):
        c = np.random.default_rng(seed).random(n)
        enc, dec = og.encoder_mask(c).allow, og.decoder_mask(c).allow
        off = ~np.eye(n, dtype=bool)
        assert np.all((enc ^ enc.T)[off])
        assert np.all(np.diag(enc)) and not np.any(np.diag(dec))
        expected = enc.copy()
        np.fill_diagonal(expected, False)
        np.testing.assert_array_equal(dec, expected)
