"""Sparse linear algebra plumbing.

Thin wrappers around scipy.sparse for factorizations, a preconditioned
conjugate gradient iteration with explicit residual history, dense
generalized eigensolves at diagnostic scale, and a coordinate text format
for debugging matrix dumps.
"""

import numpy as np
import scipy.sparse
import scipy.sparse.linalg
import scipy.linalg

__all__ = [
    "Factorization",
    "factorize",
    "cg",
    "dense_generalized_eig",
    "write_coo",
    "read_coo",
]

DEFAULT_TOL = 1e-8


class Factorization:
    """Direct factorization of a square sparse matrix.

    With ``spd=True`` the input must be symmetric; the factorization is then
    reused for solves against the matrix and (trivially) its transpose.
    """

    def __init__(self, A, spd=False):
        A = scipy.sparse.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("matrix must be square")
        if spd:
            asym = abs(A - A.T)
            if asym.nnz and asym.max() > 1e-10 * max(1.0, abs(A).max()):
                raise ValueError("SPD factorization requested for unsymmetric matrix")
        self.shape = A.shape
        self.spd = spd
        try:
            self._lu = scipy.sparse.linalg.splu(A)
        except RuntimeError as exc:
            raise ValueError(f"matrix is numerically singular: {exc}") from exc

    def solve(self, b, trans="N"):
        b = np.asarray(b, dtype=float)
        return self._lu.solve(b, trans=trans)

    def __call__(self, b):
        return self.solve(b)


def factorize(A, spd=False):
    return Factorization(A, spd=spd)


def solve(F, b):
    return F.solve(b)


def cg(A, b, preconditioner=None, tol=DEFAULT_TOL, max_iters=10000, callback=None):
    """Preconditioned conjugate gradients.

    Stops when ||A x - b|| / ||b|| <= tol (Euclidean norms, recursively
    updated residual).  Returns (x, iterations, residual_history) where the
    history holds the relative residual after each iteration.  Exceeding
    `max_iters` is reported through the truncated history, not an exception.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    normb = np.linalg.norm(b)
    x = np.zeros(n)
    if normb == 0.0:
        return x, 0, []
    apply_prec = preconditioner if preconditioner is not None else lambda r: r

    r = b.copy()
    z = apply_prec(r)
    d = z.copy()
    rz = r @ z
    history = []
    for it in range(1, max_iters + 1):
        Ad = A @ d
        alpha = rz / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        rel = np.linalg.norm(r) / normb
        history.append(rel)
        if callback is not None:
            callback(it, rel)
        if rel <= tol:
            return x, it, history
        z = apply_prec(r)
        rz_new = r @ z
        beta = rz_new / rz
        rz = rz_new
        d = z + beta * d
    return x, max_iters, history


def dense_generalized_eig(A, B):
    """Full real spectrum of B^{-1} A (ascending) for symmetric A, SPD B."""
    Ad = A.toarray() if scipy.sparse.issparse(A) else np.asarray(A, dtype=float)
    Bd = B.toarray() if scipy.sparse.issparse(B) else np.asarray(B, dtype=float)
    if Ad.shape != Bd.shape:
        raise ValueError("matrix dimensions do not match")
    return scipy.linalg.eigh(Ad, Bd, eigvals_only=True)


def write_coo(path, A):
    """Dump a sparse matrix as 'i j value' triplets (debug format)."""
    A = scipy.sparse.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write(f"{A.shape[0]} {A.shape[1]} {A.nnz}\n")
        for i, j, v in zip(A.row, A.col, A.data):
            fh.write(f"{i} {j} {v:.17g}\n")


def read_coo(path):
    with open(path) as fh:
        m, n, nnz = (int(t) for t in fh.readline().split())
        rows, cols, vals = [], [], []
        for _ in range(nnz):
            i, j, v = fh.readline().split()
            rows.append(int(i))
            cols.append(int(j))
            vals.append(float(v))
    return scipy.sparse.csr_matrix((vals, (rows, cols)), shape=(m, n))
