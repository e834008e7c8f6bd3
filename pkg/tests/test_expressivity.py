import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lometab.expressivity import (
    BeParams,
    InfeasibleRankError,
    build_counterexample,
    check_trials,
    embed_be_into_lome,
    random_be_params,
    rank_factorize_padded,
    ratio_rank_witness,
)
from lometab.layers import effective_weight
from lometab.numkernel import SingularEntryError, make_rng, numerical_rank


def frob_rel(a, b):
    scale = np.linalg.norm(b)
    return np.linalg.norm(a - b) / scale if scale else np.linalg.norm(a)


class TestFactorize:
    def test_zero(self):
        A, B = rank_factorize_padded(np.zeros((3, 4)), 2)
        assert A.shape == (3, 2) and B.shape == (4, 2)
        assert not A.any() and not B.any()

    def test_ones(self):
        A, B = rank_factorize_padded(np.ones((2, 2)), 2)
        np.testing.assert_allclose(A @ B.T, np.ones((2, 2)), rtol=0, atol=1e-12)
        assert not A[:, 1].any() and not B[:, 1].any()

    def test_rank_two_infeasible_at_one(self):
        M = np.zeros((3, 3))
        M[0, 0] = M[1, 1] = 1.0
        with pytest.raises(InfeasibleRankError):
            rank_factorize_padded(M, 1)

    @pytest.mark.parametrize("rho", [0, 1, 2])
    def test_exact_on_constructed(self, rho):
        rng = np.random.default_rng(rho)
        for _ in range(100):
            m, n = rng.integers(2, 9, size=2)
            M = rng.normal(size=(m, rho)) @ rng.normal(size=(n, rho)).T
            A, B = rank_factorize_padded(M, 4)
            assert np.abs(A @ B.T - M).max() < 1e-12 * max(1.0, np.abs(M).max())
            # columns beyond rho stay zero
            assert not A[:, rho:].any() and not B[:, rho:].any()

    def test_higher_rank_general_path(self):
        rng = np.random.default_rng(9)
        M = rng.normal(size=(6, 3)) @ rng.normal(size=(5, 3)).T
        A, B = rank_factorize_padded(M, 5)
        assert frob_rel(A @ B.T, M) < 1e-9

    def test_invalid_rank(self):
        with pytest.raises(ValueError):
            rank_factorize_padded(np.ones((2, 2)), 0)


class TestEmbed:
    def test_identity_mask(self):
        be = BeParams(np.full((3, 2), 0.5), np.ones((2, 3)), np.ones((2, 2)))
        lome = embed_be_into_lome(be)
        assert not lome.A.any() and not lome.B.any()
        np.testing.assert_array_equal(lome.effective_weights(), be.effective_weights())

    def test_hand_example(self):
        be = BeParams(np.ones((2, 2)), [[2.0, 2.0]], [[1.0, 1.0]])
        lome = embed_be_into_lome(be)
        np.testing.assert_allclose(lome.A[0] @ lome.B[0].T, np.ones((2, 2)), atol=1e-12)
        np.testing.assert_allclose(lome.effective_weights()[0], 2 * np.ones((2, 2)), atol=1e-12)

    def test_random_reconstruction(self):
        rng = make_rng(0)
        worst = 0.0
        for _ in range(100):
            m, n = (int(v) for v in rng.integers(1, 9, size=2))
            be = random_be_params(rng, m, n, int(rng.integers(1, 5)))
            lome = embed_be_into_lome(be, 2)
            target = be.effective_weights()
            worst = max(worst, np.abs(lome.effective_weights() - target).max() / np.abs(target).max())
        assert worst < 1e-9

    def test_layer_views_agree(self):
        be = random_be_params(make_rng(1), 4, 3, 3)
        lome = embed_be_into_lome(be, 3)
        for k in range(3):
            np.testing.assert_allclose(effective_weight(lome.as_layer(), k), effective_weight(be.as_layer(), k),
                                       rtol=1e-9)

    def test_rank_too_small(self):
        with pytest.raises(ValueError):
            embed_be_into_lome(random_be_params(make_rng(0), 2, 2, 1), 1)

    def test_rejects_zero_entries(self):
        with pytest.raises(ValueError):
            BeParams(np.ones((2, 2)), [[1.0, 0.0]], [[1.0, 1.0]])

    def test_mask_residual_rank(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            m, n = rng.integers(1, 9, size=2)
            assert numerical_rank(np.outer(rng.normal(size=m), rng.normal(size=n)) - 1.0) <= 2


class TestWitness:
    def test_be_pair_is_rank_one(self):
        rng = make_rng(2)
        for _ in range(100):
            m, n = (int(v) for v in rng.integers(2, 9, size=2))
            w = random_be_params(rng, m, n, 2).effective_weights()
            wit = ratio_rank_witness(w[0], w[1])
            assert wit.rank_lower_bound == 1 and wit.rows is None

    def test_equal_weights(self):
        w = np.random.default_rng(0).uniform(1, 2, size=(3, 3))
        assert ratio_rank_witness(w, w).rank_lower_bound == 1

    def test_zero_denominator(self):
        with pytest.raises(SingularEntryError):
            ratio_rank_witness(np.ones((2, 2)), np.array([[1.0, 0.0], [1.0, 1.0]]))

    def test_counterexample_ones(self):
        cx = build_counterexample(2, 2)
        w = cx.effective_weights()
        np.testing.assert_allclose(w[0], [[2.0, 1.0], [1.0, 2.0]], atol=1e-15)
        np.testing.assert_array_equal(w[1], np.ones((2, 2)))
        wit = ratio_rank_witness(w[0], w[1])
        assert wit.rank_lower_bound == 2
        assert (wit.rows, wit.cols) == ((0, 1), (0, 1))
        assert wit.determinant == pytest.approx(3.0, abs=1e-12)

    def test_counterexample_random_w(self):
        W = random_be_params(make_rng(3), 4, 5, 1).W
        w = build_counterexample(4, 5, W=W).effective_weights()
        wit = ratio_rank_witness(w[0], w[1])
        assert (wit.rank_lower_bound, wit.rows, wit.cols) == (2, (0, 1), (0, 1))
        assert wit.determinant == pytest.approx(3.0, rel=1e-12)

    def test_padding_irrelevant(self):
        w2 = build_counterexample(3, 3, r=2).effective_weights()
        w8 = build_counterexample(3, 3, r=8).effective_weights()
        np.testing.assert_allclose(w8, w2, atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2**31 - 1))
    def test_counterexample_always_strict(self, m, n, seed):
        W = random_be_params(make_rng(seed), m, n, 1).W
        w = build_counterexample(m, n, W=W).effective_weights()
        assert ratio_rank_witness(w[0], w[1]).rank_lower_bound == 2

    def test_counterexample_dims(self):
        with pytest.raises(ValueError):
            build_counterexample(1, 3)


def test_check_trials_all_ok():
    verdicts = list(check_trials(20, seed=0))
    assert len(verdicts) == 20 and all(v["ok"] for v in verdicts)
