"""Univariate B-spline spaces on (0,1).

Open uniform knot vectors, basis/derivative evaluation, Greville abscissae,
mass and stiffness matrices, dyadic two-scale refinement, and the splitting
of the interior spline space into a "large" subspace with a degree-robust
inverse inequality plus a small mass-orthogonal complement.  All spaces have
maximal smoothness C^{p-1} (simple interior knots).
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

__all__ = [
    "UnivariateSplineSpace",
    "ReducedSplit",
    "open_knot_vector",
    "eval_basis",
    "basis_matrices",
    "greville_points",
    "univariate_mass",
    "univariate_stiffness",
    "two_scale_refine",
    "reduced_split",
    "gauss_points",
]


@dataclass(frozen=True)
class UnivariateSplineSpace:
    """B-spline space of degree `p` on an open knot vector over [0,1]."""

    degree: int
    knots: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = self.degree
        kv = np.asarray(self.knots, dtype=float)
        if p < 1:
            raise ValueError("spline degree must be >= 1")
        if np.any(np.diff(kv) < 0):
            raise ValueError("knot vector must be non-decreasing")
        if not (np.all(kv[: p + 1] == kv[0]) and kv[p + 1] > kv[0]):
            raise ValueError("first knot must have multiplicity exactly p+1")
        if not (np.all(kv[-(p + 1):] == kv[-1]) and kv[-(p + 2)] < kv[-1]):
            raise ValueError("last knot must have multiplicity exactly p+1")
        object.__setattr__(self, "knots", kv)

    @property
    def n(self):
        """Dimension of the space."""
        return len(self.knots) - self.degree - 1

    @property
    def breakpoints(self):
        """Distinct knot values (element boundaries)."""
        return np.unique(self.knots)

    @property
    def num_elements(self):
        return len(self.breakpoints) - 1

    @property
    def meshsize(self):
        """Largest knot span."""
        return np.max(np.diff(self.breakpoints))

    def __eq__(self, other):
        if not isinstance(other, UnivariateSplineSpace):
            return NotImplemented
        return self.degree == other.degree and np.array_equal(self.knots, other.knots)

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))


def open_knot_vector(p, coarse_elements, level=0):
    """Uniform open-knot space with `coarse_elements * 2**level` elements."""
    if p < 1:
        raise ValueError("degree must be >= 1")
    if coarse_elements < 1:
        raise ValueError("need at least one element")
    if level < 0:
        raise ValueError("level must be >= 0")
    e = coarse_elements * 2 ** level
    interior = np.arange(1, e) / e
    knots = np.concatenate([np.zeros(p + 1), interior, np.ones(p + 1)])
    return UnivariateSplineSpace(p, knots)


def _find_span(space, x):
    """Index i with knots[i] <= x < knots[i+1], clamped to the last element."""
    kv, p, n = space.knots, space.degree, space.n
    if x >= kv[n]:
        return n - 1
    return int(np.searchsorted(kv, x, side="right")) - 1


def eval_basis(space, x, max_deriv=0):
    """Evaluate the p+1 basis functions active at `x` and their derivatives.

    Returns (first_active_index, ders) where ders has shape
    (max_deriv+1, p+1); row k holds the k-th derivatives.
    """
    if x < 0.0 or x > 1.0:
        raise ValueError(f"evaluation point {x} outside [0,1]")
    p = space.degree
    kv = space.knots
    i = _find_span(space, x)
    nd = min(max_deriv, p)

    # Cox-de Boor triangle with knot differences kept for the derivatives.
    ndu = np.zeros((p + 1, p + 1))
    left = np.zeros(p + 1)
    right = np.zeros(p + 1)
    ndu[0, 0] = 1.0
    for j in range(1, p + 1):
        left[j] = x - kv[i + 1 - j]
        right[j] = kv[i + j] - x
        saved = 0.0
        for r in range(j):
            ndu[j, r] = right[r + 1] + left[j - r]
            temp = ndu[r, j - 1] / ndu[j, r]
            ndu[r, j] = saved + right[r + 1] * temp
            saved = left[j - r] * temp
        ndu[j, j] = saved

    ders = np.zeros((max_deriv + 1, p + 1))
    ders[0, :] = ndu[:, p]
    a = np.zeros((2, p + 1))
    for r in range(p + 1):
        s1, s2 = 0, 1
        a[0, 0] = 1.0
        for k in range(1, nd + 1):
            d = 0.0
            rk, pk = r - k, p - k
            if r >= k:
                a[s2, 0] = a[s1, 0] / ndu[pk + 1, rk]
                d = a[s2, 0] * ndu[rk, pk]
            j1 = 1 if rk >= -1 else -rk
            j2 = k - 1 if r - 1 <= pk else p - r
            for j in range(j1, j2 + 1):
                a[s2, j] = (a[s1, j] - a[s1, j - 1]) / ndu[pk + 1, rk + j]
                d += a[s2, j] * ndu[rk + j, pk]
            if r <= pk:
                a[s2, k] = -a[s1, k - 1] / ndu[pk + 1, r]
                d += a[s2, k] * ndu[r, pk]
            ders[k, r] = d
            s1, s2 = s2, s1
    fact = p
    for k in range(1, nd + 1):
        ders[k, :] *= fact
        fact *= p - k
    return i - p, ders


def basis_matrices(space, points, max_deriv=0):
    """Sparse collocation matrices [B0, B1, ...] of shape (len(points), n).

    Bk[q, j] is the k-th derivative of basis function j at points[q].
    """
    pts = np.asarray(points, dtype=float)
    p, n = space.degree, space.n
    nq = len(pts)
    rows = np.repeat(np.arange(nq), p + 1)
    cols = np.empty(nq * (p + 1), dtype=int)
    data = np.empty((max_deriv + 1, nq * (p + 1)))
    for q, x in enumerate(pts):
        first, ders = eval_basis(space, x, max_deriv)
        cols[q * (p + 1):(q + 1) * (p + 1)] = np.arange(first, first + p + 1)
        data[:, q * (p + 1):(q + 1) * (p + 1)] = ders
    return [
        scipy.sparse.csr_matrix((data[k], (rows, cols)), shape=(nq, n))
        for k in range(max_deriv + 1)
    ]


def greville_points(space):
    """Knot averages: g_i = mean(knots[i+1], ..., knots[i+p])."""
    p, kv = space.degree, space.knots
    return np.array([kv[i + 1: i + p + 1].mean() for i in range(space.n)])


def gauss_points(space, npts=None):
    """Gauss-Legendre nodes/weights on every element (default p+1 per element)."""
    if npts is None:
        npts = space.degree + 1
    xg, wg = np.polynomial.legendre.leggauss(npts)
    brk = space.breakpoints
    a, b = brk[:-1], brk[1:]
    nodes = (0.5 * (b - a)[:, None] * (xg + 1.0)[None, :] + a[:, None]).ravel()
    weights = (0.5 * (b - a)[:, None] * wg[None, :]).ravel()
    return nodes, weights


def _quadrature_matrix(space, deriv_u, deriv_v):
    x, w = gauss_points(space)
    mats = basis_matrices(space, x, max(deriv_u, deriv_v))
    W = scipy.sparse.diags(w)
    return (mats[deriv_u].T @ W @ mats[deriv_v]).tocsr()


def univariate_mass(space):
    """n-by-n Gram matrix of the basis in L2(0,1)."""
    M = _quadrature_matrix(space, 0, 0)
    return ((M + M.T) * 0.5).tocsr()


def univariate_stiffness(space):
    """n-by-n Gram matrix of the basis derivatives in L2(0,1)."""
    K = _quadrature_matrix(space, 1, 1)
    return ((K + K.T) * 0.5).tocsr()


def _insert_knot(p, knots, t):
    """Boehm single-knot insertion: returns (new_knots, T) with c_new = T c."""
    n = len(knots) - p - 1
    k = int(np.searchsorted(knots, t, side="right")) - 1
    T = scipy.sparse.lil_matrix((n + 1, n))
    for i in range(n + 1):
        if i <= k - p:
            T[i, i] = 1.0
        elif i <= k:
            alpha = (t - knots[i]) / (knots[i + p] - knots[i])
            T[i, i] = alpha
            T[i, i - 1] = 1.0 - alpha
        else:
            T[i, i - 1] = 1.0
    return np.insert(knots, k + 1, t), T.tocsr()


def two_scale_refine(space):
    """Insert all element midpoints; returns (refined_space, prolongation P).

    P has shape (n_fine, n_coarse); P @ c reproduces the coarse spline
    exactly in the fine basis.
    """
    p = space.degree
    knots = space.knots.copy()
    brk = space.breakpoints
    P = scipy.sparse.identity(space.n, format="csr")
    for mid in 0.5 * (brk[:-1] + brk[1:]):
        knots, T = _insert_knot(p, knots, mid)
        P = T @ P
    return UnivariateSplineSpace(p, knots), P.tocsr()


@dataclass(frozen=True)
class ReducedSplit:
    """Splitting of the interior spline space (boundary functions removed).

    The large subspace is the kernel of endpoint derivative constraints of
    even orders 2, 4, ..., 2*floor((p-1)/2); the complement is its
    mass-orthogonal complement.  Columns of `large` / `complement` hold the
    coefficient vectors (w.r.t. the interior basis) of the two bases.
    """

    n_constraints: int
    large: np.ndarray = field(repr=False)
    complement: np.ndarray = field(repr=False)

    @property
    def n_large(self):
        return self.large.shape[1]

    @property
    def n_comp(self):
        return self.complement.shape[1]


def interior_matrix(mat):
    """Principal submatrix with the first and last row/column removed."""
    return mat[1:-1, 1:-1]


def reduced_split(space):
    """Split the interior subspace of `space` into (large, complement).

    The constraints evaluate derivatives of even orders 2..2*floor((p-1)/2)
    of the interior basis functions at both endpoints; for p <= 2 there are
    no constraints and the complement is empty.
    """
    p, n = space.degree, space.n
    n_int = n - 2
    if n_int < 1:
        raise ValueError("space has no interior basis functions")
    m = (p - 1) // 2
    orders = [2 * (j + 1) for j in range(m)]
    n_con = 2 * m
    if n_int < n_con:
        raise ValueError(
            f"interior space of dimension {n_int} cannot carry {n_con} constraints"
        )
    if n_con == 0:
        return ReducedSplit(0, np.eye(n_int), np.zeros((n_int, 0)))

    C = np.zeros((n_con, n_int))
    for side, x in enumerate((0.0, 1.0)):
        first, ders = eval_basis(space, x, max(orders))
        for r, order in enumerate(orders):
            # h-normalized so rows are comparably scaled
            row = ders[order] * space.meshsize ** order
            for j in range(p + 1):
                col = first + j - 1  # shift to interior numbering
                if 0 <= col < n_int:
                    C[side * m + r, col] += row[j]

    # kernel of C = large subspace; mass-orthogonal complement = M^{-1} C^T
    _, sv, Vt = np.linalg.svd(C)
    rank = int(np.sum(sv > max(C.shape) * np.finfo(float).eps * sv[0]))
    large = Vt[rank:].T
    M_int = interior_matrix(univariate_mass(space).toarray())
    comp = np.linalg.solve(M_int, C.T)
    # M-orthonormalize the complement for numerical hygiene
    G = comp.T @ M_int @ comp
    comp = comp @ np.linalg.inv(np.linalg.cholesky(G)).T
    return ReducedSplit(n_con, large, comp)
