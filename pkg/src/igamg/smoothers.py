"""Multigrid smoothers: Gauss-Seidel, subspace-corrected mass, hybrid.

The subspace-corrected mass smoother decomposes the free dofs of a level
into pieces: patch interiors, and the interface entities (faces in 3D,
edges, vertices).  Interface pieces get exact solvers for the principal
submatrix of the operator; interior pieces get a geometry-free
tensor-structured solver built from the univariate interior mass/stiffness
matrices and the reduced splitting, applied through fast diagonalization.
The overall correction is the damped additive composition of the
piece-local solves.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from . import bspline as bs
from . import linsolve

__all__ = [
    "Piece",
    "PieceDecomposition",
    "build_piece_decomposition",
    "GaussSeidel",
    "ScmsInteriorSolver",
    "SubspaceCorrectedMass",
    "HybridSmoother",
    "build_smoother",
]


# -- piece decomposition -------------------------------------------------------


@dataclass(frozen=True)
class Piece:
    kind: str  # 'interior' | 'face' | 'edge' | 'vertex'
    indices: np.ndarray = field(repr=False)  # free dof ids (tensor order for interiors)
    patches: tuple
    entity: tuple

    @property
    def size(self):
        return len(self.indices)


@dataclass
class PieceDecomposition:
    pieces: list
    n_free: int

    def validate_partition(self):
        seen = np.zeros(self.n_free, dtype=bool)
        for piece in self.pieces:
            if np.any(seen[piece.indices]):
                raise AssertionError("piece decomposition is not disjoint")
            seen[piece.indices] = True
        if not np.all(seen):
            raise AssertionError("piece decomposition does not cover all free dofs")


class _EntityRegistry:
    """Clusters physical points so geometric vertices/edges get stable ids."""

    def __init__(self, tol=1e-6):
        self.tol = tol
        self._ids = {}

    def vertex_id(self, point):
        key = tuple(np.round(np.asarray(point) / self.tol).astype(np.int64))
        return self._ids.setdefault(key, len(self._ids))


def _extremal_dirs(multi, dims):
    return tuple(
        a for a in range(len(dims)) if multi[a] == 0 or multi[a] == dims[a] - 1
    )


def build_piece_decomposition(hier, level):
    """Classify every free dof of a level by its extremal-direction count.

    interior = extremal in no direction; one direction gives an edge (2D)
    or face (3D) piece on the interface, two directions in 3D an edge
    piece, d directions a vertex piece.  Interface pieces aggregate dofs of
    all adjacent patches (one piece per geometric entity).
    """
    domain = hier.domain
    dofs = hier.dofs[level]
    d = hier.dim
    registry = _EntityRegistry()
    members = dofs.free_members()

    interface_of_side = {}
    for idx, iface in enumerate(domain.interfaces):
        interface_of_side[(iface.k, iface.side_k)] = idx
        interface_of_side[(iface.l, iface.side_l)] = idx

    groups = {}
    interior_dims = {}
    for fid, mem in enumerate(members):
        k, multi = mem[0]
        dims = dofs.dims[k]
        ext = _extremal_dirs(multi, dims)
        m = len(ext)
        if m == 0:
            entity = ("interior", k)
        elif m == d:
            bits = tuple(1 if multi[a] == dims[a] - 1 else 0 for a in range(d))
            vid = registry.vertex_id(domain.patches[k].corner(bits))
            entity = ("vertex", vid)
        elif m == 1 or d == 2:
            from .geometry import Side

            a = ext[0]
            side = Side(a, 1 if multi[a] == dims[a] - 1 else 0)
            iface_idx = interface_of_side.get((k, side))
            if iface_idx is None:
                raise AssertionError(
                    f"free dof of patch {k} extremal towards a boundary side"
                )
            entity = ("face" if d == 3 else "edge", iface_idx)
        else:  # m == 2, d == 3: geometric edge, identified by its endpoints
            run_axis = next(a for a in range(d) if a not in ext)
            bits_lo, bits_hi = [0] * d, [0] * d
            for a in ext:
                bits_lo[a] = bits_hi[a] = 1 if multi[a] == dims[a] - 1 else 0
            bits_hi[run_axis] = 1
            v0 = registry.vertex_id(domain.patches[k].corner(bits_lo))
            v1 = registry.vertex_id(domain.patches[k].corner(bits_hi))
            entity = ("edge", tuple(sorted((v0, v1))))
        groups.setdefault(entity, []).append(fid)

    pieces = []
    # interior pieces in tensor order so the solver can reshape directly
    for k in range(domain.num_patches):
        dims = dofs.dims[k]
        if any(n <= 2 for n in dims):
            continue
        ranges = [np.arange(1, n - 1) for n in dims]
        grids = np.meshgrid(*ranges, indexing="ij")
        flat = np.ravel_multi_index([g.ravel() for g in grids], dims)
        ids = np.array([
            dofs.free_id[dofs.class_of[dofs.offsets[k] + b]] for b in flat
        ])
        expected = sorted(groups.get(("interior", k), []))
        assert sorted(ids.tolist()) == expected
        interior_dims[k] = tuple(n - 2 for n in dims)
        pieces.append(Piece("interior", ids, (k,), ("interior", k)))
    kind_order = {"face": 0, "edge": 1, "vertex": 2}
    for entity in sorted(
        (e for e in groups if e[0] != "interior"),
        key=lambda e: (kind_order[e[0]], str(e[1])),
    ):
        fids = np.array(sorted(groups[entity]))
        patch_set = tuple(sorted({mk for fid in fids for mk, _ in members[fid]}))
        pieces.append(Piece(entity[0], fids, patch_set, entity))

    deco = PieceDecomposition(pieces, dofs.n_free)
    deco.interior_dims = interior_dims
    deco.validate_partition()
    return deco


# -- Gauss-Seidel ----------------------------------------------------------------


class GaussSeidel:
    """Forward/backward Gauss-Seidel sweeps on the lower triangle of A."""

    def __init__(self, A):
        A = A.tocsr()
        if np.any(A.diagonal() == 0.0):
            raise ValueError("Gauss-Seidel needs a nonzero diagonal")
        tril = scipy.sparse.tril(A, format="csc")
        self._lu = scipy.sparse.linalg.splu(
            tril,
            permc_spec="NATURAL",
            diag_pivot_thresh=0.0,
            options={"SymmetricMode": True},
        )

    def apply_forward(self, r):
        return self._lu.solve(r, trans="N")

    def apply_backward(self, r):
        return self._lu.solve(r, trans="T")

    def pre_smooth(self, A, u, f, steps):
        for _ in range(steps):
            u += self.apply_forward(f - A @ u)
        return u

    def post_smooth(self, A, u, f, steps):
        for _ in range(steps):
            u += self.apply_backward(f - A @ u)
        return u


def gs_apply_forward(A, r):
    return GaussSeidel(A).apply_forward(r)


def gs_apply_backward(A, r):
    return GaussSeidel(A).apply_backward(r)


# -- subspace corrected mass smoother -------------------------------------------


class ScmsInteriorSolver:
    """Geometry-free tensor solver for one patch-interior piece.

    Built from the interior univariate mass/stiffness matrices on the
    parameter domain and the reduced splitting per direction; the inverse is
    applied by fast diagonalization per subspace combination.  The scaling
    parameter is delta^{-1} h^{-2}.

    `interior_policy` selects the subspace operators.  'product' (default)
    uses the tensor-product form sigma^(1-d) * prod_dirs (K + sigma M): its
    inverse is a Kronecker product of univariate solves, it dominates the
    local operator, and it reproduces the reference iteration counts.  The
    alternatives keep the additive form sum_comp_dirs K + sigma * mass with
    the large-direction stiffness kept ('exact'), replaced by its spectral
    bound ('bound'), or dropped entirely ('mass', not convergent at the
    damping the experiments use).
    """

    def __init__(self, spaces, delta, interior_policy="product"):
        if delta <= 0:
            raise ValueError("scaling parameter delta must be positive")
        d = len(spaces)
        h = max(s.meshsize for s in spaces)
        self.sigma_scal = 1.0 / (delta * h * h)
        self.dims = tuple(s.n - 2 for s in spaces)
        bases = []  # per direction: list of (transform T, eigenvalues lam)
        for s in spaces:
            M = bs.interior_matrix(bs.univariate_mass(s).toarray())
            K = bs.interior_matrix(bs.univariate_stiffness(s).toarray())
            split = bs.reduced_split(s)
            per_flag = []
            for W in (split.large, split.complement):
                if W.shape[1] == 0:
                    per_flag.append(None)
                    continue
                Msub = W.T @ M @ W
                Ksub = W.T @ K @ W
                lam, V = scipy.linalg.eigh(Ksub, Msub)
                is_large = W is split.large
                if is_large and interior_policy == "surrogate":
                    lam = np.full_like(lam, self.sigma_scal)
                elif is_large and interior_policy == "mass":
                    lam = np.zeros_like(lam)
                elif is_large and interior_policy == "bound":
                    lam = np.full_like(lam, lam[-1])
                per_flag.append((W @ V, lam))
            bases.append(per_flag)
        self._subspaces = []
        for alpha in np.ndindex(*(2,) * d):
            if any(bases[a][alpha[a]] is None for a in range(d)):
                continue
            Ts = [bases[a][alpha[a]][0] for a in range(d)]
            if interior_policy == "product":
                denom = bases[0][alpha[0]][1] + self.sigma_scal
                for a in range(1, d):
                    denom = np.multiply.outer(
                        denom, bases[a][alpha[a]][1] + self.sigma_scal
                    )
                denom = denom / self.sigma_scal ** (d - 1)
            else:
                lam = bases[0][alpha[0]][1]
                for a in range(1, d):
                    lam = np.add.outer(lam, bases[a][alpha[a]][1])
                if interior_policy == "surrogate":
                    denom = lam  # sigma already substituted per large direction
                else:
                    denom = lam + self.sigma_scal
            self._subspaces.append((Ts, denom))

    def solve(self, r):
        R = np.asarray(r).reshape(self.dims)
        out = np.zeros_like(R)
        for Ts, denom in self._subspaces:
            Y = R
            for a, T in enumerate(Ts):
                Y = np.moveaxis(np.tensordot(T.T, Y, axes=(1, a)), 0, a)
            Y = Y / denom
            for a, T in enumerate(Ts):
                Y = np.moveaxis(np.tensordot(T, Y, axes=(1, a)), 0, a)
            out += Y
        return out.ravel()


class SubspaceCorrectedMass:
    """Damped additive composition of piece-local solvers (one level)."""

    def __init__(self, A, hier, level, tau, delta, interior_policy="product"):
        if tau <= 0 or delta <= 0:
            raise ValueError("scms needs positive damping and scaling")
        self.tau = tau
        self.decomposition = build_piece_decomposition(hier, level)
        self._solvers = []
        cache = {}
        for piece in self.decomposition.pieces:
            if piece.kind == "interior":
                k = piece.patches[0]
                spaces = hier.spaces[level][k]
                key = (tuple(hash(s) for s in spaces), delta, interior_policy)
                if key not in cache:
                    cache[key] = ScmsInteriorSolver(spaces, delta, interior_policy)
                solver = cache[key]
                self._solvers.append((piece.indices, solver.solve))
            else:
                sub = A[piece.indices][:, piece.indices].tocsc()
                fact = linsolve.factorize(sub, spd=True)
                self._solvers.append((piece.indices, fact.solve))

    def apply(self, r):
        out = np.zeros_like(r)
        for indices, solve in self._solvers:
            out[indices] += solve(r[indices])
        return self.tau * out

    def pre_smooth(self, A, u, f, steps):
        for _ in range(steps):
            u += self.apply(f - A @ u)
        return u

    post_smooth = pre_smooth


class HybridSmoother:
    """Forward GS then scms steps before coarsening; mirrored afterwards."""

    def __init__(self, gs, scms, nu_inner=1):
        self.gs = gs
        self.scms = scms
        self.nu_inner = nu_inner

    def pre_smooth(self, A, u, f, steps):
        u += self.gs.apply_forward(f - A @ u)
        for _ in range(steps * self.nu_inner):
            u += self.scms.apply(f - A @ u)
        return u

    def post_smooth(self, A, u, f, steps):
        for _ in range(steps * self.nu_inner):
            u += self.scms.apply(f - A @ u)
        u += self.gs.apply_backward(f - A @ u)
        return u


def build_smoother(kind, A, hier, level, tau=1.0, delta=0.12,
                   interior_policy="product"):
    if kind == "gs":
        return GaussSeidel(A)
    if kind == "scms":
        return SubspaceCorrectedMass(A, hier, level, tau, delta, interior_policy)
    if kind == "hyb":
        return HybridSmoother(
            GaussSeidel(A),
            SubspaceCorrectedMass(A, hier, level, tau, delta, interior_policy),
        )
    raise ValueError(f"unknown smoother kind {kind!r}")
