import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairnn import losses as L
from fairnn.data import FeatureLayout
from fairnn.numerics import NumericError, Tape

ONE_NUM_ONE_BINARY = FeatureLayout(1, (2,))


def random_gaussian(rng, d):
    A = rng.normal(size=(d, d))
    return rng.normal(size=d), A @ A.T + L.RIDGE * np.eye(d)


class TestReconstruction:
    def test_perfect_reconstruction(self):
        X = np.array([[0.3, 1.0, 0.0], [0.7, 0.0, 1.0]])
        assert L.reconstruction_loss(X, X, ONE_NUM_ONE_BINARY) == 0.0

    def test_hand_example(self):
        X = np.array([[0.5, 1.0, 0.0]])
        X_hat = np.array([[0.3, 0.8, 0.2]])
        expected = 0.2**2 - math.log(0.8)
        assert L.reconstruction_loss(X, X_hat, ONE_NUM_ONE_BINARY) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.2631, abs=1e-4)

    def test_repeating_batch_is_invariant(self, rng):
        X = np.column_stack([rng.uniform(size=5), np.eye(2)[rng.integers(0, 2, 5)]])
        p = rng.uniform(0.1, 0.9, size=5)
        X_hat = np.column_stack([rng.uniform(size=5), p, 1 - p])
        once = L.reconstruction_loss(X, X_hat, ONE_NUM_ONE_BINARY)
        twice = L.reconstruction_loss(np.vstack([X, X]), np.vstack([X_hat, X_hat]), ONE_NUM_ONE_BINARY)
        assert twice == pytest.approx(once, rel=1e-14)

    def test_mse_variant_sums_every_column(self):
        X = np.array([[0.5, 1.0, 0.0]])
        X_hat = np.array([[0.3, 0.8, 0.2]])
        assert L.reconstruction_loss(X, X_hat, ONE_NUM_ONE_BINARY, kind="mse") == pytest.approx(0.12)

    def test_zero_probability_hits_the_floor(self):
        loss = L.reconstruction_loss(np.array([[0.5, 1.0, 0.0]]), np.array([[0.5, 0.0, 1.0]]), ONE_NUM_ONE_BINARY)
        assert loss == pytest.approx(-math.log(1e-12))

    def test_negative_probability_on_observed_value(self):
        with pytest.raises(NumericError):
            L.reconstruction_loss(np.array([[0.5, 1.0, 0.0]]), np.array([[0.5, -0.1, 1.1]]), ONE_NUM_ONE_BINARY)

    def test_layout_mismatch(self):
        with pytest.raises(ValueError):
            L.reconstruction_loss(np.zeros((1, 3)), np.zeros((1, 3)), FeatureLayout(2, (2,)))

    @given(st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        X = np.column_stack([rng.uniform(size=4), np.eye(2)[rng.integers(0, 2, 4)]])
        p = rng.uniform(1e-6, 1 - 1e-6, size=4)
        X_hat = np.column_stack([rng.uniform(size=4), p, 1 - p])
        assert L.reconstruction_loss(X, X_hat, ONE_NUM_ONE_BINARY) >= 0


class TestGroupGaussians:
    def test_hand_covariance(self):
        Z = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, -1.0]])
        prot, nonprot = L.fit_group_gaussians(Z, np.array([1, 1, 0]))
        np.testing.assert_allclose(prot.mean, [1.0, 1.0])
        np.testing.assert_allclose(prot.cov, [[1 + 1e-4, 1.0], [1.0, 1 + 1e-4]], atol=1e-15)
        assert prot.n == 2
        assert nonprot is None

    def test_identical_points_give_ridge(self):
        Z = np.tile([1.0, -2.0, 3.0], (4, 1))
        g, _ = L.fit_group_gaussians(Z, np.ones(4))
        np.testing.assert_allclose(g.cov, 1e-4 * np.eye(3), atol=1e-18)

    def test_row_permutation_invariant(self, rng):
        Z = rng.normal(size=(7, 3))
        s = np.array([1, 0, 1, 1, 0, 0, 1])
        perm = rng.permutation(7)
        a = L.fit_group_gaussians(Z, s)
        b = L.fit_group_gaussians(Z[perm], s[perm])
        for ga, gb in zip(a, b):
            np.testing.assert_allclose(ga.mean, gb.mean, atol=1e-14)
            np.testing.assert_allclose(ga.cov, gb.cov, atol=1e-14)

    def test_matches_numpy_biased_covariance(self, rng):
        Z = rng.normal(size=(9, 4))
        g, _ = L.fit_group_gaussians(Z, np.ones(9))
        np.testing.assert_allclose(g.cov, np.cov(Z.T, bias=True) + 1e-4 * np.eye(4), atol=1e-13)


class TestKL:
    def test_identical_is_zero(self, rng):
        mu, S = random_gaussian(rng, 4)
        assert abs(L.kl_gaussian((mu, S), (mu, S))) <= 1e-8

    def test_mean_shift_1d(self):
        assert L.kl_gaussian(([0.0], [[1.0]]), ([1.0], [[1.0]])) == pytest.approx(0.5, abs=1e-9)

    def test_variance_ratio_1d(self):
        expected = 0.5 * (-math.log(2) - 1 + 2)
        assert L.kl_gaussian(([0.0], [[2.0]]), ([0.0], [[1.0]])) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.1534, abs=1e-4)

    def test_matches_explicit_inverse_formula(self, rng):
        # independent oracle via explicit inverses and slogdet
        mu1, S1 = random_gaussian(rng, 3)
        mu2, S2 = random_gaussian(rng, 3)
        inv2 = np.linalg.inv(S2)
        d = mu2 - mu1
        oracle = 0.5 * (
            np.linalg.slogdet(S2)[1] - np.linalg.slogdet(S1)[1] - 3 + np.trace(inv2 @ S1) + d @ inv2 @ d
        )
        assert L.kl_gaussian((mu1, S1), (mu2, S2)) == pytest.approx(oracle, rel=1e-10)

    def test_direction_is_protected_to_nonprotected(self):
        a = L.kl_gaussian(([0.0], [[2.0]]), ([0.0], [[1.0]]))
        b = L.kl_gaussian(([0.0], [[1.0]]), ([0.0], [[2.0]]))
        assert a != pytest.approx(b)

    def test_not_positive_definite(self):
        with pytest.raises(NumericError, match="eigenvalues"):
            L.kl_gaussian((np.zeros(2), np.eye(2)), (np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]])))

    @given(st.integers(0, 2**31), st.integers(1, 5))
    @settings(max_examples=50)
    def test_non_negative(self, seed, d):
        rng = np.random.default_rng(seed)
        assert L.kl_gaussian(random_gaussian(rng, d), random_gaussian(rng, d)) >= -1e-8


class TestBCE:
    def test_confident_correct(self):
        assert L.bce_loss([1.0], [1.0 - 1e-15]) == pytest.approx(0.0, abs=1e-12)

    def test_coin_flip(self):
        assert L.bce_loss([1.0], [0.5]) == pytest.approx(math.log(2), abs=1e-12)

    @given(st.integers(0, 2**31))
    @settings(max_examples=30)
    def test_label_flip_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.integers(0, 2, 6).astype(float)
        p = rng.uniform(0.01, 0.99, 6)
        assert L.bce_loss(c, p) == pytest.approx(L.bce_loss(1 - c, 1 - p), rel=1e-12)
        assert L.bce_loss(c, p) >= 0


class TestSoftEqualizedOdds:
    def test_perfect_scores(self):
        c = np.array([1, 0, 1, 0])
        assert L.soft_equalized_odds(c, c.astype(float), np.array([1, 1, 0, 0])).value == 0.0

    def test_hand_example(self):
        c = np.array([1, 1, 1, 0, 0])
        p = np.array([0.6, 0.9, 0.7, 0.0, 0.0])
        s = np.array([0, 1, 1, 1, 0])
        assert L.soft_equalized_odds(c, p, s).value == pytest.approx(0.2, abs=1e-12)

    def test_swapping_groups(self, rng):
        c = np.array([1, 0, 1, 0, 1, 0, 1, 1])
        p = rng.uniform(size=8)
        s = np.array([1, 1, 0, 0, 1, 0, 0, 1])
        assert L.soft_equalized_odds(c, p, s).value == pytest.approx(L.soft_equalized_odds(c, p, 1 - s).value)

    def test_missing_class_is_dropped_and_flagged(self):
        rates = L.soft_equalized_odds(np.array([1, 1, 0]), np.array([0.2, 0.9, 0.5]), np.array([1, 0, 1]))
        assert rates.fpr_dropped and not rates.fnr_dropped
        assert rates.value == pytest.approx(0.7)

    @given(st.integers(0, 2**31))
    @settings(max_examples=50)
    def test_range_and_group_blind_zero(self, seed):
        rng = np.random.default_rng(seed)
        c = rng.integers(0, 2, 6)
        c[:2] = [0, 1]
        p = rng.uniform(size=6)
        value = L.soft_equalized_odds(np.r_[c, c], np.r_[p, p], np.r_[np.ones(6), np.zeros(6)]).value
        assert value == pytest.approx(0.0, abs=1e-15)
        s = rng.integers(0, 2, 6)
        v = L.soft_equalized_odds(c, p, s).value
        assert v is None or 0.0 <= v <= 2.0


class TestCombinations:
    def test_autoencoder_weights(self):
        assert L.autoencoder_loss(1.0, 2.0, 0.0) == 1.0
        assert L.autoencoder_loss(1.0, 2.0, 0.9) == pytest.approx(1.9)

    def test_skipped_kl_counts_as_zero(self):
        assert L.autoencoder_loss(1.0, None, 0.9) == pytest.approx(0.1)

    def test_classifier_weights(self):
        assert L.classifier_loss(0.5, 0.1, 0.0) == 0.5
        assert L.classifier_loss(0.5, 0.1, 0.2) == pytest.approx(0.42)

    def test_total(self):
        assert L.total_loss(1.9, 0.42) == pytest.approx(2.32)

    @pytest.mark.parametrize("w", [-0.1, 1.0, 1.5])
    def test_weights_out_of_range(self, w):
        with pytest.raises(L.ConfigError):
            L.autoencoder_loss(1.0, 1.0, w)
        with pytest.raises(L.ConfigError):
            L.classifier_loss(1.0, 1.0, w)

    @given(st.floats(0, 0.99), st.floats(0, 0.99), st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 2))
    def test_breakdown_identities(self, alpha, beta, recon, kl, bce, eo):
        _, lb = L.breakdown(recon, kl, bce, L.SoftRates(eo), alpha, beta)
        assert lb.L_ae == pytest.approx((1 - alpha) * recon + alpha * kl, abs=1e-12)
        assert lb.L_cls == pytest.approx((1 - beta) * bce + beta * eo, abs=1e-12)
        assert lb.total == pytest.approx(lb.L_ae + lb.L_cls, abs=1e-12)

    def test_breakdown_flags(self):
        _, lb = L.breakdown(1.0, None, 0.5, L.SoftRates(None, fpr_dropped=True), 0.9, 0.2)
        assert lb.kl_skipped and lb.eqodds_dropped == (True, False)
        assert lb.total == pytest.approx(0.1 + 0.4)
        _, lb = L.breakdown(1.0, None, 0.5, L.SoftRates(None), 0.0, 0.0)
        assert not lb.kl_skipped

    def test_tape_inputs_stay_on_tape(self):
        t = Tape()
        obj, lb = L.breakdown(t.leaf(np.array(1.0)), t.leaf(np.array(2.0)), t.leaf(np.array(0.5)),
                              L.SoftRates(t.leaf(np.array(0.1))), 0.9, 0.2)  # fmt: skip
        assert float(obj.value) == pytest.approx(2.32)
        assert lb.as_row() == [1.0, 2.0, 0.5, 0.1, pytest.approx(1.9), pytest.approx(0.42), pytest.approx(2.32)]
