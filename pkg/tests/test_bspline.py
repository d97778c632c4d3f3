import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings, strategies as st

from igamg import bspline as bs

spaces = st.builds(
    bs.open_knot_vector,
    st.integers(min_value=1, max_value=6),
    st.integers(min_value=1, max_value=4),
    st.integers(min_value=0, max_value=3),
)


def test_open_knot_vector_examples():
    s = bs.open_knot_vector(2, 1, 0)
    assert np.array_equal(s.knots, [0, 0, 0, 1, 1, 1])
    assert s.n == 3
    s = bs.open_knot_vector(1, 1, 1)
    assert np.array_equal(s.knots, [0, 0, 0.5, 1, 1])
    assert s.n == 3
    assert bs.open_knot_vector(3, 1, 2).n == 4 + 3


def test_open_knot_vector_rejects_bad_input():
    with pytest.raises(ValueError):
        bs.open_knot_vector(0, 1, 0)
    with pytest.raises(ValueError):
        bs.open_knot_vector(2, 0, 0)


@given(spaces)
def test_dimension_is_elements_plus_degree(s):
    assert s.n == s.num_elements + s.degree


def test_eval_basis_hats():
    s = bs.open_knot_vector(1, 1, 0)
    first, ders = bs.eval_basis(s, 0.25)
    assert first == 0
    assert np.allclose(ders[0], [0.75, 0.25])


def test_eval_basis_bernstein_derivative_at_zero():
    s = bs.open_knot_vector(2, 1, 0)
    _, ders = bs.eval_basis(s, 0.0, max_deriv=1)
    assert ders[1, 0] == pytest.approx(-2.0)  # d/dx (1-x)^2 at 0


def test_eval_basis_rejects_outside():
    s = bs.open_knot_vector(2, 1, 0)
    with pytest.raises(ValueError):
        bs.eval_basis(s, 1.5)


@given(spaces, st.floats(min_value=0.0, max_value=1.0))
def test_partition_of_unity(s, x):
    _, ders = bs.eval_basis(s, x)
    assert abs(ders[0].sum() - 1.0) <= 1e-12


@given(spaces, st.floats(min_value=0.05, max_value=0.95))
@settings(max_examples=40)
def test_derivative_matches_finite_difference(s, x):
    eps = 1e-6
    fp, dp = bs.eval_basis(s, x + eps, 0)
    fm, dm = bs.eval_basis(s, x - eps, 0)
    if fp != fm:  # straddling a breakpoint: active sets differ
        return
    _, ders = bs.eval_basis(s, x, 1)
    fd = (dp[0] - dm[0]) / (2 * eps)
    scale = max(1.0, np.abs(ders[1]).max())
    assert np.abs(ders[1] - fd).max() / scale <= 1e-6


def test_greville_examples():
    assert np.allclose(bs.greville_points(bs.open_knot_vector(2, 1, 0)), [0, 0.5, 1])
    assert np.allclose(bs.greville_points(bs.open_knot_vector(1, 1, 1)), [0, 0.5, 1])
    assert np.allclose(
        bs.greville_points(bs.open_knot_vector(3, 1, 0)), [0, 1 / 3, 2 / 3, 1]
    )


@given(spaces)
def test_greville_monotone_in_unit_interval(s):
    g = bs.greville_points(s)
    assert np.all(np.diff(g) >= 0)
    assert g[0] == 0.0 and g[-1] == 1.0
    assert np.all((g >= 0) & (g <= 1))


def test_mass_stiffness_p1():
    s = bs.open_knot_vector(1, 1, 0)
    assert np.allclose(bs.univariate_mass(s).toarray(), [[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
    assert np.allclose(bs.univariate_stiffness(s).toarray(), [[1, -1], [-1, 1]])


def test_mass_bernstein_p2():
    # frozen from symbolic integration of Bernstein products (sympy oracle)
    expected = np.array(
        [[1 / 5, 1 / 10, 1 / 30], [1 / 10, 2 / 15, 1 / 10], [1 / 30, 1 / 10, 1 / 5]]
    )
    M = bs.univariate_mass(bs.open_knot_vector(2, 1, 0)).toarray()
    assert np.allclose(M, expected, atol=1e-14)


@given(spaces)
def test_stiffness_kernel_is_constants(s):
    K = bs.univariate_stiffness(s)
    assert np.abs(K @ np.ones(s.n)).max() <= 1e-12


@given(spaces)
@settings(max_examples=30)
def test_mass_spd_stiffness_banded_symmetric(s):
    M = bs.univariate_mass(s).toarray()
    K = bs.univariate_stiffness(s).toarray()
    assert np.allclose(M, M.T) and np.allclose(K, K.T)
    assert np.linalg.eigvalsh(M).min() > 0
    p = s.degree
    i, j = np.nonzero(M)
    assert np.abs(i - j).max() <= p
    i, j = np.nonzero(K)
    assert np.abs(i - j).max() <= p


def test_two_scale_p1():
    s = bs.open_knot_vector(1, 1, 0)
    fine, P = bs.two_scale_refine(s)
    assert np.array_equal(fine.knots, [0, 0, 0.5, 1, 1])
    assert np.allclose(P.toarray(), [[1, 0], [0.5, 0.5], [0, 1]])


def test_two_scale_p2_first_column():
    # frozen from the evaluation oracle (coarse basis reproduced in fine basis)
    _, P = bs.two_scale_refine(bs.open_knot_vector(2, 1, 0))
    assert np.allclose(P.toarray()[:, 0], [1, 0.5, 0, 0])


@given(spaces)
@settings(max_examples=25)
def test_two_scale_reproduces_coarse_functions(s):
    fine, P = bs.two_scale_refine(s)
    xs = np.linspace(0, 1, 201)
    Bc = bs.basis_matrices(s, xs)[0].toarray()
    Bf = bs.basis_matrices(fine, xs)[0].toarray()
    assert np.abs(Bf @ P.toarray() - Bc).max() <= 1e-12
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0)


@given(spaces)
@settings(max_examples=25)
def test_galerkin_nesting(s):
    fine, P = bs.two_scale_refine(s)
    for build in (bs.univariate_mass, bs.univariate_stiffness):
        coarse = build(s).toarray()
        projected = (P.T @ build(fine) @ P).toarray()
        assert np.abs(projected - coarse).max() <= 1e-10


def test_reduced_split_constraint_counts():
    for p, expected in [(1, 0), (2, 0), (3, 2), (4, 2), (5, 4), (8, 6)]:
        split = bs.reduced_split(bs.open_knot_vector(p, 1, 4))
        assert split.n_comp == expected == 2 * ((p - 1) // 2)


def test_reduced_split_dimensions_and_orthogonality():
    for p in range(1, 9):
        s = bs.open_knot_vector(p, 1, 4)
        split = bs.reduced_split(s)
        n_int = s.n - 2
        assert split.n_large + split.n_comp == n_int
        M = bs.interior_matrix(bs.univariate_mass(s).toarray())
        cross = split.large.T @ M @ split.complement
        if cross.size:
            assert np.abs(cross).max() <= 1e-12


def test_reduced_split_rejects_tiny_space():
    with pytest.raises(ValueError):
        bs.reduced_split(bs.open_knot_vector(1, 1, 0))  # no interior functions


def test_robust_inverse_inequality_on_large_subspace():
    # lambda_max(K, M) * h^2 restricted to the large subspace must not grow
    # with the degree: measured constant varies by < 2x over p in 1..6.
    consts = []
    for p in range(1, 7):
        s = bs.open_knot_vector(p, 1, 4)  # 16 elements
        M = bs.interior_matrix(bs.univariate_mass(s).toarray())
        K = bs.interior_matrix(bs.univariate_stiffness(s).toarray())
        W = bs.reduced_split(s).large
        lam = scipy.linalg.eigh(W.T @ K @ W, W.T @ M @ W, eigvals_only=True)[-1]
        consts.append(lam * s.meshsize ** 2)
    assert max(consts) / min(consts) < 2.0
