import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fusestyle.errors import ContractError, ValidationError
from fusestyle.layer import instance_stats
from fusestyle.selection import (
    CorrelationMatrix,
    SelectionStrategy,
    correlation_matrix,
    flatten_features,
    kl_diag_gaussian,
    select_least_dot,
    select_max_euclidean,
    select_max_kl,
    select_random_perm,
    select_reference,
)
from fusestyle.tensor import Tensor


# -- independent oracles ----------------------------------------------------


def scan_argmin(rho):
    B = len(rho)
    out = []
    for i in range(B):
        best, arg = math.inf, None
        for j in range(B):
            if j != i and rho[i][j] < best:
                best, arg = rho[i][j], j
        out.append(arg)
    return out


def scan_farthest(rows):
    B = len(rows)
    out = []
    for i in range(B):
        best, arg = -1.0, None
        for j in range(B):
            if j == i:
                continue
            d = sum((a - b) ** 2 for a, b in zip(rows[i], rows[j]))
            if d > best:
                best, arg = d, j
        out.append(arg)
    return out


def scalar_kl(mi, si, mj, sj):
    total = 0.0
    for a, b, c, d in zip(mi, si, mj, sj):
        total += math.log(d / b) + (b * b + (a - c) ** 2) / (2 * d * d) - 0.5
        total += math.log(b / d) + (d * d + (a - c) ** 2) / (2 * b * b) - 0.5
    return total


def scan_kl(mu, sigma):
    B = len(mu)
    out = []
    for i in range(B):
        best, arg = -math.inf, None
        for j in range(B):
            if j == i:
                continue
            d = scalar_kl(mu[i], sigma[i], mu[j], sigma[j])
            if d > best:
                best, arg = d, j
        out.append(arg)
    return out


# -- tests --------------------------------------------------------------------


class TestStrategyNames:
    def test_short_names(self):
        assert [s.short_name for s in SelectionStrategy] == ["m1", "ra", "m2", "m3"]

    @pytest.mark.parametrize("name", ["ra", "RA", "LeastDotProduct", "leastdotproduct"])
    def test_parse(self, name):
        assert SelectionStrategy.parse(name) is SelectionStrategy.LeastDotProduct

    def test_parse_unknown(self):
        with pytest.raises(ValidationError):
            SelectionStrategy.parse("m9")


class TestFlatten:
    def test_row_major(self):
        assert flatten_features(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).tolist() == [[1, 2, 3, 4]]

    def test_zero(self):
        assert not flatten_features(np.zeros((2, 3, 2, 2))).any()

    def test_index_oracle(self):
        z = np.random.default_rng(0).normal(size=(2, 2, 2, 2))
        flat = flatten_features(z)
        for b in range(2):
            for c in range(2):
                for h in range(2):
                    for w in range(2):
                        assert flat[b, c * 4 + h * 2 + w] == z[b, c, h, w]


class TestCorrelation:
    def test_identity_rows(self):
        assert correlation_matrix(np.eye(2)).rho.tolist() == [[1, 0], [0, 1]]

    def test_single_row(self):
        v = np.array([[3.0, 4.0, 1.0]])
        assert correlation_matrix(v).rho.tolist() == [[26.0]]

    def test_triple_loop(self):
        z = np.random.default_rng(1).normal(size=(4, 7))
        rho = correlation_matrix(z).rho
        for i in range(4):
            for j in range(4):
                assert abs(rho[i, j] - sum(z[i, n] * z[j, n] for n in range(7))) < 1e-10

    def test_symmetry_and_diagonal(self):
        z = np.random.default_rng(2).normal(size=(9, 20))
        rho = correlation_matrix(z).rho
        assert np.array_equal(rho, rho.T) or np.max(np.abs(rho - rho.T)) < 1e-9
        np.testing.assert_allclose(np.diag(rho), (z * z).sum(axis=1), atol=1e-9)


class TestLeastDot:
    def test_worked_example(self):
        rho = np.array([[9.0, 2.0, 5.0], [2.0, 9.0, 1.0], [5.0, 1.0, 9.0]])
        assert select_least_dot(CorrelationMatrix(rho)).tolist() == [1, 2, 1]

    def test_all_equal_ties(self):
        assert select_least_dot(np.ones((5, 5))).tolist() == [1, 0, 0, 0, 0]

    def test_identical_rows_tie_exactly(self):
        # sizes where a blocked matmul would split rows across kernels
        for B, N in ((13, 18), (33, 4096)):
            z = np.repeat(np.random.default_rng(B).normal(size=(1, N)), B, axis=0)
            assert len(np.unique(correlation_matrix(z).rho)) == 1
            assert select_least_dot(correlation_matrix(z)).tolist() == [1] + [0] * (B - 1)

    def test_diagonal_never_chosen(self):
        rho = np.full((3, 3), 5.0)
        np.fill_diagonal(rho, -100.0)
        assert select_least_dot(rho).tolist() == [1, 0, 0]

    def test_scan_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            rho = rng.normal(size=(16, 16))
            assert select_least_dot(rho).tolist() == scan_argmin(rho.tolist())

    def test_needs_pairs(self):
        with pytest.raises(ContractError):
            select_least_dot(np.ones((1, 1)))

    def test_row_shift_invariance(self):
        rng = np.random.default_rng(4)
        rho = rng.normal(size=(6, 6))
        base = select_least_dot(rho)
        shifted = rho + rng.normal(size=(6, 1)) * 10
        assert np.array_equal(select_least_dot(shifted), base)


class TestRandomPerm:
    def test_single(self):
        assert select_random_perm(1, np.random.default_rng(0)).tolist() == [0]

    def test_uniform_slots(self):
        rng = np.random.default_rng(5)
        counts = np.zeros((5, 5))
        for _ in range(10_000):
            counts[np.arange(5), select_random_perm(5, rng)] += 1
        assert np.all(np.abs(counts / 10_000 - 0.2) < 0.02)

    def test_determinism(self):
        a = select_random_perm(32, np.random.default_rng(9))
        assert np.array_equal(a, select_random_perm(32, np.random.default_rng(9)))
        assert sorted(a.tolist()) == list(range(32))


class TestMaxEuclidean:
    def test_worked_example(self):
        assert select_max_euclidean(np.array([[0.0], [1.0], [10.0]])).tolist() == [2, 2, 0]

    def test_identical_pair(self):
        assert select_max_euclidean(np.ones((2, 3))).tolist() == [1, 0]

    def test_scan_oracle(self):
        z = np.random.default_rng(6).normal(size=(8, 5))
        assert select_max_euclidean(z).tolist() == scan_farthest(z.tolist())

    def test_needs_pairs(self):
        with pytest.raises(ContractError):
            select_max_euclidean(np.ones((1, 4)))


class TestKL:
    def test_identical(self):
        s = (np.array([0.3, -1.0]), np.array([1.2, 0.4]))
        assert kl_diag_gaussian(s, s) == 0.0

    @pytest.mark.parametrize("delta", [0.5, 1.0, 3.0])
    def test_mean_shift(self, delta):
        got = kl_diag_gaussian((np.array([0.0]), np.array([1.0])), (np.array([delta]), np.array([1.0])))
        assert got == pytest.approx(delta ** 2, abs=1e-12)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            mi, mj = rng.normal(size=4), rng.normal(size=4)
            si, sj = rng.uniform(0.1, 3, size=4), rng.uniform(0.1, 3, size=4)
            got = kl_diag_gaussian((mi, si), (mj, sj))
            assert abs(got - scalar_kl(mi, si, mj, sj)) < 1e-10

    def test_rejects_non_positive_sigma(self):
        with pytest.raises(ValidationError):
            kl_diag_gaussian((np.zeros(1), np.zeros(1)), (np.zeros(1), np.ones(1)))

    def test_worked_selection(self):
        mu = np.array([[0.0, 0.0], [0.0, 0.0], [5.0, 5.0]])
        assert select_max_kl((mu, np.ones((3, 2)))).tolist() == [2, 2, 0]

    def test_identical_instances_tie(self):
        assert select_max_kl((np.zeros((4, 2)), np.ones((4, 2)))).tolist() == [1, 0, 0, 0]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(8)
        for B in range(2, 17):
            mu, sigma = rng.normal(size=(B, 3)), rng.uniform(0.2, 2, size=(B, 3))
            assert select_max_kl((mu, sigma)).tolist() == scan_kl(mu.tolist(), sigma.tolist())

    def test_accepts_instance_stats(self):
        z = Tensor(np.random.default_rng(9).normal(size=(5, 3, 4, 4)))
        s = instance_stats(z)
        assert select_max_kl(s).tolist() == scan_kl(s.mu.data.tolist(), s.sigma.data.tolist())


class TestDispatch:
    def test_routes(self):
        z = Tensor(np.random.default_rng(10).normal(size=(6, 2, 3, 3)))
        s = instance_stats(z)
        flat = flatten_features(z)
        assert select_reference("ra", z).tolist() == select_least_dot(correlation_matrix(flat)).tolist()
        assert select_reference("m2", z).tolist() == select_max_euclidean(flat).tolist()
        assert select_reference("m3", z, s).tolist() == select_max_kl(s).tolist()
        assert sorted(select_reference("m1", z, rng=np.random.default_rng(0)).tolist()) == list(range(6))

    def test_missing_inputs(self):
        z = Tensor(np.ones((3, 1, 2, 2)))
        with pytest.raises(ContractError):
            select_reference("m1", z)
        with pytest.raises(ContractError):
            select_reference("m3", z)

    def test_cosine_normalises_rows(self):
        z = np.random.default_rng(11).normal(size=(5, 8))
        scaled = z * np.array([[1.0], [10.0], [0.1], [3.0], [7.0]])
        unit = z / np.linalg.norm(z, axis=1, keepdims=True)
        expected = select_least_dot(correlation_matrix(unit)).tolist()
        assert select_reference("ra", scaled.reshape(5, 2, 2, 2), cosine=True).tolist() == expected


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 12), st.floats(0.01, 100.0))
def test_least_dot_scale_invariant(seed, B, scale):
    z = np.random.default_rng(seed).normal(size=(B, 6))
    a = select_least_dot(correlation_matrix(z))
    b = select_least_dot(correlation_matrix(z * scale))
    assert np.array_equal(a, b)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 10))
def test_selectors_exclude_self(seed, B):
    rng = np.random.default_rng(seed)
    z = Tensor(rng.normal(size=(B, 2, 3, 3)))
    s = instance_stats(z)
    for strategy in ("ra", "m2", "m3"):
        refs = select_reference(strategy, z, s)
        assert refs.shape == (B,)
        assert np.all((refs >= 0) & (refs < B))
        assert np.all(refs != np.arange(B))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_kl_symmetric_non_negative(seed):
    rng = np.random.default_rng(seed)
    a = (rng.normal(size=3), rng.uniform(0.1, 3, size=3))
    b = (rng.normal(size=3), rng.uniform(0.1, 3, size=3))
    assert kl_diag_gaussian(a, b) == pytest.approx(kl_diag_gaussian(b, a), rel=1e-12)
    assert kl_diag_gaussian(a, b) > 0
