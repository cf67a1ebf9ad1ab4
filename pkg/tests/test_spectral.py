import math

import numpy as np
import pytest

from freqd.errors import DimensionMismatch, IndexOutOfRange, NonMonotoneWeights, TooLarge
from freqd.graphcore import (
    SparseGraph,
    identity_filter,
    linear_filter,
    normalized_laplacian,
    quadratic_filter,
)
from freqd.spectral import (
    broadcast_group_weights,
    eigendecompose,
    frequency_component,
    group_losses,
    knowledge_groups,
    per_frequency_losses,
    reweighted_loss_explicit,
    verify_theorem1,
    verify_theorem2,
    verify_theorem3,
)

from conftest import random_connected_graph


def k2_lap():
    return normalized_laplacian(SparseGraph.from_undirected(2, [(0, 1)]))


def setup(n, rng, d=3, p=0.3):
    lap = normalized_laplacian(random_connected_graph(n, p, rng))
    return lap, eigendecompose(lap)


class TestEigendecompose:
    def test_k2(self):
        dec = eigendecompose(k2_lap())
        np.testing.assert_allclose(dec.eigenvalues, [0.0, 2.0], atol=1e-14)
        np.testing.assert_allclose(dec.eigenvectors[:, 0], [2**-0.5, 2**-0.5], atol=1e-14)

    @pytest.mark.parametrize("n", [8, 32, 100])
    def test_reconstruction_and_orthonormality(self, n, rng):
        lap, dec = setup(n, rng)
        u, lam = dec.eigenvectors, dec.eigenvalues
        dense = lap.dense()
        assert np.linalg.norm(u @ np.diag(lam) @ u.T - dense) <= 1e-8 * np.linalg.norm(dense)
        assert np.linalg.norm(u.T @ u - np.eye(n)) <= 1e-8
        assert np.all(np.diff(lam) >= 0)
        assert lam[0] >= -1e-9 and lam[-1] <= 2 + 1e-9

    def test_sign_convention(self, rng):
        _, dec = setup(20, rng)
        u = dec.eigenvectors
        first = np.argmax(np.abs(u) > 1e-12, axis=0)
        assert np.all(u[first, np.arange(20)] > 0)

    def test_too_large(self):
        n = 5000
        g = SparseGraph.from_undirected(n, np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1))
        with pytest.raises(TooLarge):
            eigendecompose(normalized_laplacian(g))


class TestFrequencyComponents:
    def test_completeness(self, rng):
        _, dec = setup(16, rng)
        x = rng.normal(size=(16, 4))
        total = sum(frequency_component(x, k, dec).component for k in range(1, 17))
        np.testing.assert_allclose(total, x, atol=1e-9)

    def test_parseval(self, rng):
        for n in (8, 16, 32, 64):
            _, dec = setup(n, rng)
            x = rng.normal(size=(n, 5))
            energy = math.fsum(np.sum(frequency_component(x, k, dec).component ** 2)
                               for k in range(1, n + 1))
            assert abs(energy - np.sum(x**2)) / np.sum(x**2) <= 1e-9

    def test_eigenvector_columns(self, rng):
        _, dec = setup(10, rng)
        x = np.tile(dec.eigenvectors[:, [0]], (1, 3))
        np.testing.assert_allclose(frequency_component(x, 1, dec).component, x, atol=1e-12)
        for k in range(2, 11):
            np.testing.assert_allclose(frequency_component(x, k, dec).component, 0.0, atol=1e-12)

    def test_outer_product_oracle(self, rng):
        _, dec = setup(8, rng)
        x = rng.normal(size=(8, 3))
        for k in range(1, 9):
            u = dec.eigenvectors[:, k - 1]
            oracle = np.zeros((8, 3))
            for a in range(8):
                for b in range(8):
                    oracle[a] += u[a] * u[b] * x[b]
            np.testing.assert_allclose(frequency_component(x, k, dec).component, oracle, atol=1e-12)

    def test_index_range(self, rng):
        _, dec = setup(5, rng)
        for k in (0, 6):
            with pytest.raises(IndexOutOfRange):
                frequency_component(np.zeros((5, 1)), k, dec)


class TestPerFrequencyLosses:
    def test_equal_inputs(self, rng):
        _, dec = setup(9, rng)
        t = rng.normal(size=(9, 4))
        np.testing.assert_array_equal(per_frequency_losses(t, t, dec), 0.0)

    def test_sum_equals_frobenius(self, rng):
        _, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 6))
        per_k = per_frequency_losses(s, t, dec)
        direct = float(np.sum((s - t) ** 2))
        assert abs(math.fsum(per_k) - direct) / direct <= 1e-9

    def test_explicit_definition(self, rng):
        _, dec = setup(12, rng)
        s, t = rng.normal(size=(2, 12, 3))
        per_k = per_frequency_losses(s, t, dec)
        for k in range(12):
            u = dec.eigenvectors[:, k]
            q = np.outer(u, u) @ (s - t)
            assert per_k[k] == pytest.approx(np.sum(q * q), rel=1e-10, abs=1e-14)

    def test_single_eigenvector_difference(self, rng):
        _, dec = setup(10, rng)
        t = rng.normal(size=(10, 4))
        s = t + np.outer(dec.eigenvectors[:, 2], [1.0, -2.0, 0.5, 3.0])
        per_k = per_frequency_losses(s, t, dec)
        assert per_k[2] == pytest.approx(1 + 4 + 0.25 + 9)
        assert np.all(np.delete(per_k, 2) < 1e-20)

    def test_shape_mismatch(self, rng):
        _, dec = setup(6, rng)
        with pytest.raises(DimensionMismatch):
            per_frequency_losses(np.zeros((6, 2)), np.zeros((6, 3)), dec)


class TestGroups:
    def test_n8(self):
        assert knowledge_groups(8).one_based() == [[1, 2], [3, 4], [5, 6], [7, 8]]

    def test_n7(self):
        assert knowledge_groups(7).one_based() == [[1], [2, 3], [4, 5], [6, 7]]

    @pytest.mark.parametrize("n", range(1, 40))
    def test_partition(self, n):
        groups = knowledge_groups(n).one_based()
        flat = [k for g in groups for k in g]
        assert flat == list(range(1, n + 1))
        assert groups[0] == list(range(1, n // 4 + 1))
        assert groups[3] == list(range(3 * n // 4 + 1, n + 1))

    def test_unit_losses(self):
        assert group_losses(np.ones(8)) == (2.0, 2.0, 2.0, 2.0)

    def test_group_sum_reproduces_total(self, rng):
        for n in (8, 13, 32):
            per_k = rng.random(n) * 10.0 ** rng.integers(-3, 3, size=n)
            total = 0.0
            for v in per_k:
                total += v
            assert math.fsum(group_losses(per_k)) == pytest.approx(total, rel=1e-15)

    def test_broadcast(self):
        np.testing.assert_array_equal(broadcast_group_weights((1, 0.75, 0.5, 0.25), 7),
                                      [1, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25])


class TestReweighted:
    def test_unit_weights_give_plain_loss(self, rng):
        _, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 4))
        loss = reweighted_loss_explicit(s, t, dec, np.ones(16))
        assert loss == pytest.approx(np.sum((s - t) ** 2), rel=1e-12)

    def test_group_weights_linearity(self, rng):
        _, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 4))
        w = (1.0, 0.75, 0.5, 0.25)
        groups = group_losses(per_frequency_losses(s, t, dec))
        loss = reweighted_loss_explicit(s, t, dec, broadcast_group_weights(w, 16), strict=True)
        assert loss == pytest.approx(sum(a * b for a, b in zip(w, groups)), rel=1e-12)

    def test_strict_monotonicity(self, rng):
        _, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 4))
        rising = broadcast_group_weights((0.25, 0.5, 0.75, 1.0), 16)
        reweighted_loss_explicit(s, t, dec, rising)  # allowed without strict
        with pytest.raises(NonMonotoneWeights):
            reweighted_loss_explicit(s, t, dec, rising, strict=True)
        with pytest.raises(NonMonotoneWeights):
            reweighted_loss_explicit(s, t, dec, -np.ones(16), strict=True)

    def test_h_squared_equals_filtered_loss(self, rng):
        lap, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 4))
        f = linear_filter(0.3)
        from freqd.graphcore import apply_filter
        diff = apply_filter(f, lap, s) - apply_filter(f, lap, t)
        h = f.response(dec.eigenvalues)
        assert reweighted_loss_explicit(s, t, dec, h * h, strict=True) == pytest.approx(
            np.sum(diff * diff), rel=1e-9)


class TestTheorems:
    def test_theorem2_identity_filter(self, rng):
        lap, dec = setup(12, rng)
        s, t = rng.normal(size=(2, 12, 3))
        rep = verify_theorem2(lap, identity_filter(), s, t, dec)
        assert rep.lhs == pytest.approx(np.sum((s - t) ** 2), rel=1e-12)
        assert rep.rel_err <= 1e-12

    @pytest.mark.parametrize("filt", [linear_filter(0.1), linear_filter(0.3), linear_filter(0.5),
                                      quadratic_filter(0.1, -0.6)])
    def test_theorem2(self, filt, rng):
        lap, dec = setup(16, rng)
        s, t = rng.normal(size=(2, 16, 4))
        assert verify_theorem2(lap, filt, s, t, dec).rel_err <= 1e-9

    def test_theorem2_equal_inputs(self, rng):
        lap, dec = setup(10, rng)
        t = rng.normal(size=(10, 3))
        rep = verify_theorem2(lap, linear_filter(0.3), t, t, dec)
        assert rep.lhs == 0.0 and rep.rhs == 0.0 and rep.rel_err == 0.0

    def test_theorem1(self, rng):
        _, dec = setup(32, rng)
        s, t = rng.normal(size=(2, 32, 8))
        assert verify_theorem1(s, t, dec).rel_err <= 1e-9

    def test_theorem3_random(self, rng):
        _, dec = setup(8, rng)
        s = rng.normal(size=(8, 3))
        t = rng.normal(size=(8, 5))
        assert verify_theorem3(dec, s, t).rel_err <= 1e-8

    def test_theorem3_gram_oracle(self, rng):
        # each pair term collapses to ((S^T u_k).(S^T u_p) - (T^T u_k).(T^T u_p))^2
        _, dec = setup(10, rng)
        s = rng.normal(size=(10, 2))
        t = rng.normal(size=(10, 4))
        a = dec.eigenvectors.T @ s
        b = dec.eigenvectors.T @ t
        oracle = float(np.sum((a @ a.T - b @ b.T) ** 2))
        assert verify_theorem3(dec, s, t).rhs == pytest.approx(oracle, rel=1e-10)

    def test_theorem3_equal(self, rng):
        _, dec = setup(6, rng)
        s = rng.normal(size=(6, 3))
        rep = verify_theorem3(dec, s, s)
        assert rep.lhs == 0.0 and rep.rhs == 0.0

    def test_theorem3_single_pair(self, rng):
        _, dec = setup(7, rng)
        s = np.outer(dec.eigenvectors[:, 0], [1.0, 2.0])
        rep = verify_theorem3(dec, s, np.zeros((7, 2)))
        assert rep.lhs == pytest.approx(25.0)
        assert rep.rhs == pytest.approx(25.0)

    def test_theorem3_too_large(self, rng):
        _, dec = setup(70, rng)
        with pytest.raises(TooLarge):
            verify_theorem3(dec, np.zeros((70, 1)), np.zeros((70, 1)))

    def test_report_lines(self, rng):
        lap, dec = setup(6, rng)
        rep = verify_theorem2(lap, linear_filter(0.2), *rng.normal(size=(2, 6, 2)), dec)
        keys = [line.split("=")[0] for line in rep.lines()]
        assert keys == ["lhs", "rhs", "rel_err"]
