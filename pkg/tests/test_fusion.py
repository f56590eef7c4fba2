import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

import oracles

from sasvbackend import fusion
from sasvbackend.fusion import TrialEmbeddings


def te(e, t, c):
    return TrialEmbeddings(np.asarray(e, float), np.asarray(t, float), np.asarray(c, float))


finite_vec = st.lists(
    st.floats(-100, 100, allow_nan=False, allow_infinity=False), min_size=1, max_size=64
)


class TestConcat:
    def test_scalars(self):
        out = fusion.concat(te([1.0], [2.0], [3.0]))
        assert out.mode == fusion.CONCAT
        np.testing.assert_array_equal(out.tensor, [1.0, 2.0, 3.0])

    def test_mixed_lengths(self):
        out = fusion.concat(te([1, 2], [3], [4, 5]))
        np.testing.assert_array_equal(out.tensor, [1, 2, 3, 4, 5])

    def test_challenge_dims_give_544(self, rng):
        out = fusion.concat(
            te(rng.normal(size=192), rng.normal(size=192), rng.normal(size=160))
        )
        assert out.tensor.shape == (544,)

    def test_empty_embedding_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            te([], [1.0], [2.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="finite"):
            te([np.nan], [1.0], [2.0])


class TestPadToCommon:
    def test_pads_shortest(self):
        a, b, c = fusion.pad_to_common(te([1, 2], [3, 4], [5]))
        np.testing.assert_array_equal(a, [1, 2])
        np.testing.assert_array_equal(b, [3, 4])
        np.testing.assert_array_equal(c, [5, 0])

    def test_equal_lengths_unchanged(self, rng):
        vecs = [rng.normal(size=7) for _ in range(3)]
        out = fusion.pad_to_common(te(*vecs))
        for given_v, padded in zip(vecs, out):
            np.testing.assert_array_equal(given_v, padded)

    def test_challenge_dims_pad_cm_by_32(self, rng):
        _, _, c = fusion.pad_to_common(
            te(rng.normal(size=192), rng.normal(size=192), rng.normal(size=160))
        )
        assert c.shape == (192,)
        np.testing.assert_array_equal(c[160:], np.zeros(32))

    @given(
        d=st.integers(1, 64), b=st.integers(1, 64), q=st.integers(1, 64)
    )
    @settings(max_examples=50, deadline=None)
    def test_common_length_is_max(self, d, b, q):
        out = fusion.pad_to_common(
            te(np.ones(d), np.ones(b), np.ones(q))
        )
        assert all(v.shape == (max(d, b, q),) for v in out)


class TestCirculant:
    def test_three_elements(self):
        np.testing.assert_array_equal(
            fusion.circulant(np.array([1.0, 2.0, 3.0])),
            [[1, 2, 3], [3, 1, 2], [2, 3, 1]],
        )

    def test_singleton(self):
        np.testing.assert_array_equal(fusion.circulant(np.array([7.0])), [[7.0]])

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fusion.circulant(np.array([]))

    def test_rows_are_index_formula(self, rng):
        v = rng.normal(size=8)
        mat = fusion.circulant(v)
        x = rng.normal(size=8)
        # matrix action agrees with the direct sum over v[(j-i) mod D]
        for i in range(8):
            expected = sum(v[(j - i) % 8] * x[j] for j in range(8))
            assert mat[i] @ x == pytest.approx(expected, abs=1e-12)

    @given(finite_vec)
    @settings(max_examples=60, deadline=None)
    def test_row_rotation_property(self, vals):
        v = np.array(vals)
        mat = fusion.circulant(v)
        for i in range(len(v) - 1):
            np.testing.assert_array_equal(np.roll(mat[i], 1), mat[i + 1])

    @given(finite_vec)
    @settings(max_examples=60, deadline=None)
    def test_toeplitz_index_structure(self, vals):
        v = np.array(vals)
        mat = fusion.circulant(v)
        n = len(v)
        for i in range(n):
            for j in range(n):
                assert mat[i, j] == v[(j - i) % n]

    @given(finite_vec)
    @settings(max_examples=60, deadline=None)
    def test_row_sums_equal_vector_sum(self, vals):
        v = np.array(vals)
        mat = fusion.circulant(v)
        np.testing.assert_allclose(mat.sum(axis=1), np.full(len(v), v.sum()), atol=1e-9)

    def test_matches_loop_reference(self, rng):
        v = rng.normal(size=11)
        np.testing.assert_array_equal(fusion.circulant(v), oracles.circulant_loops(v))


class TestStacking:
    def test_stack_1d_scalars(self):
        out = fusion.stack_1d(te([1.0], [2.0], [3.0]))
        assert out.mode == fusion.STACK1D
        np.testing.assert_array_equal(out.tensor, [[1.0], [2.0], [3.0]])

    def test_stack_1d_pads_rows(self):
        out = fusion.stack_1d(te([1, 2], [3], [4, 5]))
        np.testing.assert_array_equal(out.tensor, [[1, 2], [3, 0], [4, 5]])

    def test_stack_1d_challenge_dims(self, rng):
        out = fusion.stack_1d(
            te(rng.normal(size=192), rng.normal(size=192), rng.normal(size=160))
        )
        assert out.tensor.shape == (3, 192)

    def test_circulant_2d_singletons(self):
        out = fusion.stack_circulant_2d(te([1.0], [2.0], [3.0]))
        assert out.mode == fusion.CIRC2D
        assert out.tensor.shape == (3, 1, 1)

    def test_circulant_2d_channels(self):
        out = fusion.stack_circulant_2d(te([1, 2], [0, 0], [3, 4]))
        np.testing.assert_array_equal(out.tensor[0], [[1, 2], [2, 1]])
        np.testing.assert_array_equal(out.tensor[1], np.zeros((2, 2)))
        np.testing.assert_array_equal(out.tensor[2], [[3, 4], [4, 3]])

    def test_circulant_2d_challenge_dims(self, rng):
        out = fusion.stack_circulant_2d(
            te(rng.normal(size=192), rng.normal(size=192), rng.normal(size=160))
        )
        assert out.tensor.shape == (3, 192, 192)

    @given(
        d=st.integers(1, 64), b=st.integers(1, 64), q=st.integers(1, 64)
    )
    @settings(max_examples=40, deadline=None)
    def test_shapes_for_random_dims(self, d, b, q):
        embeddings = te(np.ones(d), np.ones(b), np.ones(q))
        common = max(d, b, q)
        assert fusion.concat(embeddings).tensor.shape == (d + b + q,)
        assert fusion.stack_1d(embeddings).tensor.shape == (3, common)
        assert fusion.stack_circulant_2d(embeddings).tensor.shape == (3, common, common)


class TestFuseBatch:
    def test_batch_stacks_leading_axis(self, rng):
        tes = [
            te(rng.normal(size=4), rng.normal(size=4), rng.normal(size=3))
            for _ in range(5)
        ]
        batch = fusion.fuse_batch(tes, fusion.CIRC2D)
        assert batch.shape == (5, 3, 4, 4)
        np.testing.assert_array_equal(batch[2], fusion.stack_circulant_2d(tes[2]).tensor)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="unknown fusion mode"):
            fusion.fuse(te([1.0], [1.0], [1.0]), "bogus")

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            fusion.fuse_batch([], fusion.CONCAT)
