"""Discrete hierarchies and assembly of the bilinear forms.

Builds per-level, per-patch tensor-product spline spaces (conforming with
interface-matched numbering, or discontinuous with block-per-patch
numbering), assembles broken stiffness/mass, the interface jump and
consistency forms of the symmetric interior penalty coupling, right-hand
sides with strong Dirichlet elimination, and the inter-level transfers.

The penalty is **fixed at the finest level**: every level uses
sigma * p^2 / h_L, so coarse forms are over-penalized by 2^(L-l) relative
to the level-canonical value and the Galerkin identity
P^T A_l P = A_{l-1} holds exactly.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse

from . import bspline as bs
from . import geometry as geom

__all__ = [
    "Assumption2Error",
    "ManufacturedProblem",
    "DiscreteHierarchy",
    "AssembledLevel",
    "build_hierarchy",
    "assemble_level",
    "assemble_rhs",
    "prolongation",
    "geometry_condition_diagnostic",
    "l2_error",
]


class Assumption2Error(ValueError):
    """Conforming coupling requested for non-matching interface spaces."""


@dataclass(frozen=True)
class ManufacturedProblem:
    """Exact solution prod_a sin(pi x_a) with source f = -lap = d pi^2 g."""

    dim: int

    def exact(self, X):
        return np.prod(np.sin(np.pi * np.asarray(X)), axis=-1)

    def source(self, X):
        return self.dim * np.pi ** 2 * self.exact(X)

    def dirichlet(self, X):
        return self.exact(X)


# -- degrees of freedom --------------------------------------------------------


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i):
        p = self.parent
        root = i
        while p[root] != root:
            root = p[root]
        while p[i] != root:
            p[i], i = root, p[i]
        return root

    def union(self, i, j):
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return
        if ri > rj:
            ri, rj = rj, ri
        self.parent[rj] = ri


@dataclass
class LevelDofs:
    """Global numbering of one level: class structure and free/Dirichlet split."""

    dims: list  # per patch: tuple of per-direction dimensions
    offsets: np.ndarray
    class_of: np.ndarray  # block index -> class root (block index)
    free_id: dict  # class root -> free index
    dirichlet_id: dict  # class root -> dirichlet index
    n_free: int
    n_dirichlet: int

    def block_index(self, k, multi):
        return self.offsets[k] + np.ravel_multi_index(multi, self.dims[k])

    def free_of(self, k, multi):
        root = self.class_of[self.block_index(k, multi)]
        return self.free_id.get(root, -1)

    @property
    def n_block(self):
        return self.offsets[-1]

    def scatter_matrices(self):
        """0/1 matrices Zfree (n_block x n_free) and Zdir (n_block x n_dir)."""
        rows_f, cols_f, rows_d, cols_d = [], [], [], []
        for b in range(self.n_block):
            root = self.class_of[b]
            if root in self.free_id:
                rows_f.append(b)
                cols_f.append(self.free_id[root])
            else:
                rows_d.append(b)
                cols_d.append(self.dirichlet_id[root])
        Zf = scipy.sparse.csr_matrix(
            (np.ones(len(rows_f)), (rows_f, cols_f)), shape=(self.n_block, self.n_free)
        )
        Zd = scipy.sparse.csr_matrix(
            (np.ones(len(rows_d)), (rows_d, cols_d)),
            shape=(self.n_block, self.n_dirichlet),
        )
        return Zf, Zd

    def free_members(self):
        """For each free dof: list of (patch, multi-index) class members."""
        members = [[] for _ in range(self.n_free)]
        for k, dims in enumerate(self.dims):
            for flat in range(int(np.prod(dims))):
                root = self.class_of[self.offsets[k] + flat]
                fid = self.free_id.get(root, -1)
                if fid >= 0:
                    members[fid].append((k, np.unravel_index(flat, dims)))
        return members


def _side_lattice(dims, side):
    """Multi-index arrays of the dof layer on a side, ordered by tangential axes."""
    d = len(dims)
    tang = side.tangential_axes(d)
    tang_sizes = [dims[a] for a in tang]
    grids = np.meshgrid(*[np.arange(s) for s in tang_sizes], indexing="ij")
    multi = []
    for a in range(d):
        if a == side.axis:
            multi.append(np.full(grids[0].shape if grids else (), side.end * (dims[a] - 1)))
        else:
            multi.append(grids[tang.index(a)])
    return multi, tang_sizes


@dataclass
class DiscreteHierarchy:
    """Nested per-patch tensor spaces for levels 0..L plus global numberings."""

    domain: geom.MultiPatchDomain
    p: int
    L: int
    mode: str  # 'conforming' | 'dg'
    space_rule: str  # 'matching' | 'nonmatching'
    coarse_elements: int = 1
    spaces: list = field(default_factory=list)  # [level][patch] -> tuple of spaces
    dofs: list = field(default_factory=list)  # [level] -> LevelDofs

    @property
    def dim(self):
        return self.domain.dim

    def n_free(self, level):
        return self.dofs[level].n_free

    def finest_meshsize(self):
        """h_L: smallest element size over patches/directions on the finest level."""
        return min(
            s.meshsize for patch_spaces in self.spaces[self.L] for s in patch_spaces
        )

    def patch_meshsize(self, level, k):
        return max(s.meshsize for s in self.spaces[level][k])


def _patch_spaces(p, rule, k, level, coarse_elements):
    if rule == "matching":
        deg, lev = p, level
    elif rule == "nonmatching":
        r = k % 3
        deg = p + 1 if r == 1 else p
        lev = level if r == 0 else max(level - 1, 0)
    else:
        raise ValueError(f"unknown space rule {rule!r}")
    return deg, bs.open_knot_vector(deg, coarse_elements, lev)


def build_hierarchy(domain, p, L, mode="conforming", space_rule="matching",
                    coarse_elements=1):
    """Construct spaces and global numberings for levels 0..L."""
    if mode not in ("conforming", "dg"):
        raise ValueError(f"unknown coupling mode {mode!r}")
    if mode == "conforming" and space_rule != "matching":
        raise Assumption2Error(
            "conforming coupling requires matching spaces on the interfaces"
        )
    if L < 1:
        raise ValueError("need at least one refinement level")
    hier = DiscreteHierarchy(domain, p, L, mode, space_rule, coarse_elements)
    d = domain.dim
    for level in range(L + 1):
        per_patch = []
        for k in range(domain.num_patches):
            _, space = _patch_spaces(p, space_rule, k, level, coarse_elements)
            per_patch.append(tuple(space for _ in range(d)))
        hier.spaces.append(per_patch)
        hier.dofs.append(_build_dofs(domain, per_patch, mode))
    return hier


def _check_assumption2(domain, per_patch, iface):
    d = domain.dim
    tk = iface.side_k.tangential_axes(d)
    tl = iface.side_l.tangential_axes(d)
    for i in range(d - 1):
        sk = per_patch[iface.k][tk[i]]
        sl = per_patch[iface.l][tl[iface.orientation.perm[i]]]
        same = sk.degree == sl.degree and len(sk.knots) == len(sl.knots)
        if same:
            kl = sl.knots if not iface.orientation.flips[i] else 1.0 - sl.knots[::-1]
            same = np.allclose(sk.knots, kl, atol=1e-12)
        if not same:
            raise Assumption2Error(
                f"interface between patches {iface.k} and {iface.l}: tangential "
                "spaces do not match (degree/knot vector differ)"
            )


def _build_dofs(domain, per_patch, mode):
    dims = [tuple(s.n for s in spaces) for spaces in per_patch]
    sizes = [int(np.prod(dd)) for dd in dims]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_block = offsets[-1]

    uf = _UnionFind(n_block)
    if mode == "conforming":
        for iface in domain.interfaces:
            _check_assumption2(domain, per_patch, iface)
            multi_k, tang_sizes = _side_lattice(dims[iface.k], iface.side_k)
            d = domain.dim
            tl = iface.side_l.tangential_axes(d)
            grids_k = np.meshgrid(*[np.arange(s) for s in tang_sizes], indexing="ij")
            # tangential index of l per slot, after orientation
            idx_l_slots = [None] * (d - 1)
            for i in range(d - 1):
                j = iface.orientation.perm[i]
                n_tang = dims[iface.l][tl[j]]
                idx = grids_k[i]
                idx_l_slots[j] = (n_tang - 1 - idx) if iface.orientation.flips[i] else idx
            multi_l = []
            for a in range(d):
                if a == iface.side_l.axis:
                    multi_l.append(
                        np.full(grids_k[0].shape, iface.side_l.end * (dims[iface.l][a] - 1))
                    )
                else:
                    multi_l.append(idx_l_slots[tl.index(a)])
            bk = offsets[iface.k] + np.ravel_multi_index(
                [m.ravel() for m in multi_k], dims[iface.k]
            )
            bl = offsets[iface.l] + np.ravel_multi_index(
                [m.ravel() for m in multi_l], dims[iface.l]
            )
            for a, b in zip(bk, bl):
                uf.union(a, b)

    class_of = np.array([uf.find(i) for i in range(n_block)], dtype=np.int64)

    dirichlet_roots = set()
    for k, side in domain.boundary:
        multi, _ = _side_lattice(dims[k], side)
        blk = offsets[k] + np.ravel_multi_index([m.ravel() for m in multi], dims[k])
        for b in blk:
            dirichlet_roots.add(class_of[b])

    roots = sorted(set(class_of.tolist()))
    free_id, dirichlet_id = {}, {}
    for r in roots:
        if r in dirichlet_roots:
            dirichlet_id[r] = len(dirichlet_id)
        else:
            free_id[r] = len(free_id)
    return LevelDofs(
        dims, offsets, class_of, free_id, dirichlet_id, len(free_id), len(dirichlet_id)
    )


# -- quadrature assembly -------------------------------------------------------


def _kron_chain(mats):
    out = mats[0]
    for m in mats[1:]:
        out = scipy.sparse.kron(out, m, format="csr")
    return out


def _patch_quadrature(spaces):
    nodes, weights, B, D = [], [], [], []
    for s in spaces:
        x, w = bs.gauss_points(s)
        b0, b1 = bs.basis_matrices(s, x, 1)
        nodes.append(x)
        weights.append(w)
        B.append(b0)
        D.append(b1)
    return nodes, weights, B, D


def _probe_jacobian(patch):
    """Constant diagonal Jacobian (scale factors) or None."""
    probe = [np.array([0.0, 0.37, 1.0])] * patch.dim
    _, J = patch.eval_grid(probe)
    J = J.reshape(-1, patch.dim, patch.dim)
    if np.abs(J - J[0]).max() > 1e-13:
        return None
    J0 = J[0]
    if np.abs(J0 - np.diag(np.diag(J0))).max() > 1e-13:
        return None
    return np.diag(J0).copy()


def _bulk_matrices(patch, spaces, neglect_geometry):
    """Per-patch stiffness and mass in the full tensor basis."""
    d = len(spaces)
    scal = np.ones(d) if neglect_geometry else _probe_jacobian(patch)
    if scal is not None:
        det = float(np.prod(scal))
        Ms = [bs.univariate_mass(s) for s in spaces]
        Ks = [bs.univariate_stiffness(s) for s in spaces]
        M = det * _kron_chain(Ms)
        K = scipy.sparse.csr_matrix(M.shape)
        for a in range(d):
            K = K + (det / scal[a] ** 2) * _kron_chain(
                [Ks[i] if i == a else Ms[i] for i in range(d)]
            )
        return K.tocsr(), M.tocsr()

    nodes, weights, B, D = _patch_quadrature(spaces)
    _, J = patch.eval_grid(nodes)
    detJ = np.abs(np.linalg.det(J))
    if detJ.min() <= 0:
        raise geom.GeometryError("singular Jacobian at a quadrature point")
    Jinv = np.linalg.inv(J)
    G = np.einsum("...ac,...bc,...->...ab", Jinv, Jinv, detJ)
    wq = weights[0]
    for w in weights[1:]:
        wq = np.multiply.outer(wq, w)
    Bk = [_kron_chain([D[i] if i == a else B[i] for i in range(d)]) for a in range(d)]
    B0 = _kron_chain(B)
    M = (B0.T @ scipy.sparse.diags((wq * detJ).ravel()) @ B0).tocsr()
    K = scipy.sparse.csr_matrix(M.shape)
    for a in range(d):
        for b in range(a, d):
            W = scipy.sparse.diags((wq * G[..., a, b]).ravel())
            T = (Bk[a].T @ W @ Bk[b]).tocsr()
            K = K + T if a == b else K + T + T.T
    return K.tocsr(), M.tocsr()


def _merged_breakpoints(vals_a, vals_b):
    v = np.sort(np.concatenate([vals_a, vals_b]))
    keep = np.concatenate([[True], np.diff(v) > 1e-12])
    return v[keep]


def _interface_quadrature(hier, level, iface):
    """Tangential Gauss grid (k-side coordinates) on the merged breakpoints."""
    d = hier.dim
    sk = hier.spaces[level][iface.k]
    sl = hier.spaces[level][iface.l]
    tk = iface.side_k.tangential_axes(d)
    tl = iface.side_l.tangential_axes(d)
    p_max = max(max(s.degree for s in sk), max(s.degree for s in sl))
    xg, wg = np.polynomial.legendre.leggauss(p_max + 1)
    axes, weights = [], []
    for i in range(d - 1):
        brk_k = sk[tk[i]].breakpoints
        j = iface.orientation.perm[i]
        brk_l = sl[tl[j]].breakpoints
        if iface.orientation.flips[i]:
            brk_l = np.sort(1.0 - brk_l)
        brk = _merged_breakpoints(brk_k, brk_l)
        a, b = brk[:-1], brk[1:]
        axes.append((0.5 * (b - a)[:, None] * (xg + 1) + a[:, None]).ravel())
        weights.append((0.5 * (b - a)[:, None] * np.broadcast_to(wg, (len(a), len(wg)))).ravel())
    return axes, weights, p_max


def _side_trace_matrices(spaces, side, tang_points):
    """Value/gradient rows of the full tensor basis on a side.

    Rows enumerate the tensor product of `tang_points` (ordered by the
    side's tangential axes); returns (T, [G_0..G_{d-1}]) with G_b the rows
    of the parameter derivative in direction b.
    """
    d = len(spaces)
    tang = side.tangential_axes(d)
    val_mats, der_mats = [], []
    for a in range(d):
        if a == side.axis:
            pts = np.array([float(side.end)])
        else:
            pts = tang_points[tang.index(a)]
        b0, b1 = bs.basis_matrices(spaces[a], pts, 1)
        val_mats.append(b0)
        der_mats.append(b1)
    T = _kron_chain(val_mats)
    G = [
        _kron_chain([der_mats[i] if i == b else val_mats[i] for i in range(d)])
        for b in range(d)
    ]
    return T, G


def _row_permutation(orient, sizes_k):
    """Row reorder so the l-side tensor rows match the k-side enumeration."""
    m = len(sizes_k)
    sizes_l = [0] * m
    for i in range(m):
        sizes_l[orient.perm[i]] = sizes_k[i]
    grids = np.meshgrid(*[np.arange(s) for s in sizes_k], indexing="ij")
    idx_l = [None] * m
    for i in range(m):
        idx_l[orient.perm[i]] = grids[i]
    return np.ravel_multi_index([g.ravel() for g in idx_l], sizes_l)


def _interface_matrices(hier, level, iface, neglect_geometry):
    """Jump and consistency forms of one interface on the block numbering.

    Returns (rows Jmp, rows Avg, surface weights, column block slices).
    """
    d = hier.dim
    domain = hier.domain
    dofs = hier.dofs[level]
    axes, weights, _ = _interface_quadrature(hier, level, iface)
    sizes = [len(a) for a in axes]
    nq = int(np.prod(sizes))

    spaces_k = hier.spaces[level][iface.k]
    spaces_l = hier.spaces[level][iface.l]
    Tk, Gk = _side_trace_matrices(spaces_k, iface.side_k, axes)

    # l-side tangential point arrays (flips applied, order kept)
    axes_l = [None] * (d - 1)
    for i in range(d - 1):
        j = iface.orientation.perm[i]
        axes_l[j] = 1.0 - axes[i] if iface.orientation.flips[i] else axes[i]
    Tl, Gl = _side_trace_matrices(spaces_l, iface.side_l, axes_l)
    if d == 3:
        rp = _row_permutation(iface.orientation, sizes)
        Tl = Tl[rp]
        Gl = [g[rp] for g in Gl]

    # geometry on the k side drives measure and normal
    tang_k = iface.side_k.tangential_axes(d)
    full_axes_k = [None] * d
    for a in range(d):
        full_axes_k[a] = (
            np.array([float(iface.side_k.end)]) if a == iface.side_k.axis
            else axes[tang_k.index(a)]
        )
    if neglect_geometry:
        Jk = np.broadcast_to(np.eye(d), (nq, d, d))
        Jl = Jk
    else:
        _, Jk = domain.patches[iface.k].eval_grid(full_axes_k)
        Jk = Jk.reshape(nq, d, d)
        tang_l = iface.side_l.tangential_axes(d)
        full_axes_l = [None] * d
        for a in range(d):
            full_axes_l[a] = (
                np.array([float(iface.side_l.end)]) if a == iface.side_l.axis
                else axes_l[tang_l.index(a)]
            )
        _, Jl = domain.patches[iface.l].eval_grid(full_axes_l)
        Jl = Jl.reshape(*(len(ax) for ax in full_axes_l if True), d, d).reshape(-1, d, d)
        if d == 3:
            Jl = Jl[_row_permutation(iface.orientation, sizes)]

    tangents = [Jk[:, :, a] for a in tang_k]
    if d == 2:
        surf = np.linalg.norm(tangents[0], axis=1)
    else:
        surf = np.linalg.norm(np.cross(tangents[0], tangents[1]), axis=1)
    wq = weights[0]
    for w in weights[1:]:
        wq = np.multiply.outer(wq, w)
    wsurf = wq.ravel() * surf

    nhat = np.zeros(d)
    nhat[iface.side_k.axis] = 1.0 if iface.side_k.end == 1 else -1.0
    n_phys = np.einsum("qba,b->qa", np.linalg.inv(Jk), nhat)  # J^{-T} nhat
    n_phys /= np.linalg.norm(n_phys, axis=1)[:, None]

    def grad_n(G, J):
        coef = np.einsum("qab,qb->qa", np.linalg.inv(J), n_phys)  # J^{-1} n
        rows = scipy.sparse.csr_matrix(G[0].shape)
        for b in range(d):
            rows = rows + scipy.sparse.diags(coef[:, b]) @ G[b]
        return rows

    Jmp = scipy.sparse.hstack([Tk, -Tl], format="csr")
    Avg = scipy.sparse.hstack([0.5 * grad_n(Gk, Jk), 0.5 * grad_n(Gl, Jl)], format="csr")
    cols = np.concatenate([
        dofs.offsets[iface.k] + np.arange(int(np.prod(dofs.dims[iface.k]))),
        dofs.offsets[iface.l] + np.arange(int(np.prod(dofs.dims[iface.l]))),
    ])
    return Jmp, Avg, wsurf, cols


@dataclass
class AssembledLevel:
    """Free-dof matrices of one level plus Dirichlet coupling data."""

    level: int
    K: scipy.sparse.csr_matrix
    M: scipy.sparse.csr_matrix
    J: scipy.sparse.csr_matrix  # raw jump form
    B: scipy.sparse.csr_matrix  # consistency form (unsymmetric)
    A: scipy.sparse.csr_matrix
    Q: scipy.sparse.csr_matrix
    sigma: float
    h_L: float
    couple: scipy.sparse.csr_matrix = None  # free x dirichlet block of A
    dirichlet_points: np.ndarray = None

    @property
    def n(self):
        return self.A.shape[0]


def _expand(mat, rows_cols, n_block):
    """Embed a local matrix into block numbering (rows_cols = column ids)."""
    E = scipy.sparse.csr_matrix(
        (np.ones(len(rows_cols)), (rows_cols, np.arange(len(rows_cols)))),
        shape=(n_block, len(rows_cols)),
    )
    return E @ mat @ E.T


def assemble_level(hier, level, sigma=5.0, neglect_geometry=False):
    """Assemble K, M (+ J, B and the penalized A in dG mode) on one level.

    In conforming mode A = K and the interface forms are zero.  Positive
    definiteness of A for the given sigma is *not* verified here; see
    `check_coercivity`.
    """
    domain = hier.domain
    dofs = hier.dofs[level]
    n_block = dofs.n_block

    K_blocks, M_blocks = [], []
    for k in range(domain.num_patches):
        Kp, Mp = _bulk_matrices(
            domain.patches[k], hier.spaces[level][k], neglect_geometry
        )
        K_blocks.append(Kp)
        M_blocks.append(Mp)
    K = scipy.sparse.block_diag(K_blocks, format="csr")
    M = scipy.sparse.block_diag(M_blocks, format="csr")

    h_L = hier.finest_meshsize()
    J = scipy.sparse.csr_matrix((n_block, n_block))
    Jpen = scipy.sparse.csr_matrix((n_block, n_block))
    Bc = scipy.sparse.csr_matrix((n_block, n_block))
    if hier.mode == "dg":
        for iface in domain.interfaces:
            Jmp, Avg, wsurf, cols = _interface_matrices(
                hier, level, iface, neglect_geometry
            )
            W = scipy.sparse.diags(wsurf)
            Jloc = (Jmp.T @ W @ Jmp).tocsr()
            Bloc = (Avg.T @ W @ Jmp).tocsr()  # B[i,j] = (jump phi_j, avg grad phi_i . n)
            p_int = max(
                max(s.degree for s in hier.spaces[level][iface.k]),
                max(s.degree for s in hier.spaces[level][iface.l]),
            )
            J = J + _expand(Jloc, cols, n_block)
            Jpen = Jpen + p_int ** 2 * _expand(Jloc, cols, n_block)
            Bc = Bc + _expand(Bloc, cols, n_block)

    Zf, Zd = dofs.scatter_matrices()
    A_blk = K + (sigma / h_L) * Jpen - Bc - Bc.T
    Q_blk = K + (sigma / h_L) * Jpen

    def reduce(mat):
        return (Zf.T @ mat @ Zf).tocsr()

    asm = AssembledLevel(
        level=level,
        K=reduce(K),
        M=reduce(M),
        J=reduce(J),
        B=(Zf.T @ Bc @ Zf).tocsr(),
        A=reduce(A_blk),
        Q=reduce(Q_blk),
        sigma=sigma,
        h_L=h_L,
        couple=(Zf.T @ A_blk @ Zd).tocsr(),
        dirichlet_points=_dirichlet_points(hier, level, neglect_geometry),
    )
    asym = abs(asm.A - asm.A.T)
    if asym.nnz and asym.max() > 1e-10 * abs(asm.A).max():
        raise AssertionError("assembled operator lost symmetry")
    return asm


def _dirichlet_points(hier, level, neglect_geometry):
    """Physical Greville point of each Dirichlet class representative."""
    dofs = hier.dofs[level]
    pts = np.zeros((dofs.n_dirichlet, hier.dim))
    seen = set()
    for k in range(hier.domain.num_patches):
        grev = [bs.greville_points(s) for s in hier.spaces[level][k]]
        if neglect_geometry:
            X = np.stack(np.meshgrid(*grev, indexing="ij"), axis=-1)
        else:
            X, _ = hier.domain.patches[k].eval_grid(grev)
        dims = dofs.dims[k]
        flat = X.reshape(-1, hier.dim)
        for b in range(int(np.prod(dims))):
            root = dofs.class_of[dofs.offsets[k] + b]
            did = dofs.dirichlet_id.get(root, -1)
            if did >= 0 and did not in seen:
                seen.add(did)
                pts[did] = flat[b]
    return pts


def assemble_rhs(hier, asm, problem):
    """Load vector of the source, with the Dirichlet lift eliminated.

    The lift takes the coefficients of g at Dirichlet dofs by Greville-point
    interpolation; f_free = load_free - A[free, dirichlet] @ lift.
    """
    if asm.level != hier.L:
        raise ValueError("right-hand side is assembled on the finest level only")
    dofs = hier.dofs[hier.L]
    load = np.zeros(dofs.n_block)
    pos = 0
    for k in range(hier.domain.num_patches):
        spaces = hier.spaces[hier.L][k]
        nodes, weights, B, _ = _patch_quadrature(spaces)
        X, J = hier.domain.patches[k].eval_grid(nodes)
        detJ = np.abs(np.linalg.det(J))
        wq = weights[0]
        for w in weights[1:]:
            wq = np.multiply.outer(wq, w)
        fvals = problem.source(X)
        B0 = _kron_chain(B)
        size = int(np.prod(dofs.dims[k]))
        load[pos: pos + size] = B0.T @ (wq * detJ * fvals).ravel()
        pos += size

    Zf, _ = dofs.scatter_matrices()
    load_free = Zf.T @ load
    if dofs.n_dirichlet:
        lift = problem.dirichlet(asm.dirichlet_points)
        load_free = load_free - asm.couple @ lift
    return load_free


def prolongation(hier, level):
    """Canonical embedding of level-1 free dofs into level free dofs."""
    if level < 1:
        raise ValueError("prolongation needs level >= 1")
    dofs_f, dofs_c = hier.dofs[level], hier.dofs[level - 1]
    entries = {}
    for k in range(hier.domain.num_patches):
        mats = []
        for sc, sf in zip(hier.spaces[level - 1][k], hier.spaces[level][k]):
            if sc == sf:
                mats.append(scipy.sparse.identity(sc.n, format="csr"))
            else:
                refined, P1 = bs.two_scale_refine(sc)
                if refined != sf:
                    raise AssertionError("hierarchy spaces are not dyadically nested")
                mats.append(P1)
        Pk = _kron_chain(mats).tocoo()
        off_f, off_c = dofs_f.offsets[k], dofs_c.offsets[k]
        for i, j, v in zip(Pk.row, Pk.col, Pk.data):
            fi = dofs_f.free_id.get(dofs_f.class_of[off_f + i], -1)
            fj = dofs_c.free_id.get(dofs_c.class_of[off_c + j], -1)
            if fi >= 0 and fj >= 0:
                entries[(fi, fj)] = v
    rows, cols, vals = [], [], []
    for (i, j), v in entries.items():
        rows.append(i)
        cols.append(j)
        vals.append(v)
    return scipy.sparse.csr_matrix(
        (vals, (rows, cols)), shape=(dofs_f.n_free, dofs_c.n_free)
    )


def check_coercivity(asm):
    """Smallest eigenvalue of A (dense, diagnostic scale); must be positive."""
    import scipy.linalg

    ev = scipy.linalg.eigh(asm.A.toarray(), eigvals_only=True)
    if ev[0] <= 0:
        raise ValueError(
            f"assembled operator is not positive definite (lambda_min={ev[0]:.3e}); "
            "increase the penalty parameter sigma"
        )
    return ev[0]


def geometry_condition_diagnostic(A, A_hat):
    """Extreme generalized eigenvalues of (A, A_hat) and their ratio."""
    from . import linsolve

    ev = linsolve.dense_generalized_eig(A, A_hat)
    return float(ev[0]), float(ev[-1]), float(ev[-1] / ev[0])


def solution_coefficients(hier, asm, u_free, problem=None):
    """Expand free coefficients to the block numbering, with Dirichlet lift."""
    dofs = hier.dofs[asm.level]
    Zf, Zd = dofs.scatter_matrices()
    u = Zf @ u_free
    if problem is not None and dofs.n_dirichlet:
        u = u + Zd @ problem.dirichlet(asm.dirichlet_points)
    return u


def l2_error(hier, asm, u_free, problem):
    """L2(Omega) distance between the discrete solution and the exact one."""
    u_block = solution_coefficients(hier, asm, u_free, problem)
    total = 0.0
    pos = 0
    for k in range(hier.domain.num_patches):
        spaces = hier.spaces[asm.level][k]
        nodes, weights, B, _ = _patch_quadrature(spaces)
        X, J = hier.domain.patches[k].eval_grid(nodes)
        detJ = np.abs(np.linalg.det(J))
        wq = weights[0]
        for w in weights[1:]:
            wq = np.multiply.outer(wq, w)
        size = int(np.prod(hier.dofs[asm.level].dims[k]))
        B0 = _kron_chain(B)
        uh = (B0 @ u_block[pos: pos + size]).reshape(X.shape[:-1])
        diff = uh - problem.exact(X)
        total += float(np.sum(wq * detJ * diff ** 2))
        pos += size
    return np.sqrt(total)
