"""Patch geometry maps and multi-patch topology.

A patch is the image of the unit square/cube under a (possibly rational)
tensor-product spline map.  The multi-patch domain records which patch sides
coincide (interfaces, with orientation) and which lie on the domain
boundary.  Interfaces must be full side-to-side matches: partial overlaps
("hanging" interfaces) and overlapping patches are rejected.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import bspline as bs

__all__ = [
    "GeometryMap",
    "Side",
    "Orientation",
    "Interface",
    "MultiPatchDomain",
    "detect_interfaces",
    "unit_square",
    "l_shape",
    "fichera",
    "square_grid",
    "distorted_grid",
    "write_geometry",
    "read_geometry",
]

MATCH_TOL = 1e-8


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class GeometryMap:
    """Tensor-product spline (or NURBS) map from (0,1)^d into R^d."""

    spaces: tuple
    control_points: np.ndarray = field(repr=False)
    weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        dims = tuple(s.n for s in self.spaces)
        cp = np.asarray(self.control_points, dtype=float)
        if cp.shape != dims + (self.dim,):
            raise GeometryError(
                f"control point array has shape {cp.shape}, expected {dims + (self.dim,)}"
            )
        object.__setattr__(self, "control_points", cp)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != dims:
                raise GeometryError("weight array shape does not match the space")
            if np.any(w <= 0):
                raise GeometryError("weights must be positive")
            object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return len(self.spaces)

    def _homogeneous(self):
        d = self.dim
        if self.weights is None:
            w = np.ones(self.control_points.shape[:-1])
        else:
            w = self.weights
        H = np.concatenate([self.control_points * w[..., None], w[..., None]], axis=-1)
        return H  # shape dims + (d+1,)

    def eval_grid(self, axes):
        """Evaluate on the tensor grid given by per-direction point arrays.

        Returns (X, J): X has shape grid + (d,), J has shape grid + (d, d)
        with J[..., a, b] = d x_a / d xi_b.
        """
        d = self.dim
        axes = [np.atleast_1d(np.asarray(a, dtype=float)) for a in axes]
        B = [bs.basis_matrices(self.spaces[i], axes[i], 1) for i in range(d)]
        H = self._homogeneous()

        def contract(mats):
            T = H
            for ax, m in enumerate(mats):
                T = np.moveaxis(np.tensordot(m.toarray(), T, axes=(1, ax)), 0, ax)
            return T

        vals = [contract([B[i][1 if i == der else 0] for i in range(d)])
                for der in range(-1, d)]
        V = vals[0]
        X = V[..., :d] / V[..., d:]
        J = np.empty(V.shape[:-1] + (d, d))
        for b in range(d):
            Vb = vals[1 + b]
            J[..., :, b] = (Vb[..., :d] - X * Vb[..., d:]) / V[..., d:]
        return X, J

    def eval(self, xi):
        """Point and Jacobian of the map at a single parameter point."""
        xi = np.asarray(xi, dtype=float)
        if np.any(xi < 0) or np.any(xi > 1):
            raise GeometryError(f"parameter point {xi} outside the unit cube")
        X, J = self.eval_grid([np.array([c]) for c in xi])
        return X.reshape(self.dim), J.reshape(self.dim, self.dim)

    def corner(self, bits):
        return self.eval(np.asarray(bits, dtype=float))[0]

    def jacobian_sign_check(self, samples=6):
        """Determinant sign on a sample grid; raises if it changes or vanishes."""
        pts = [np.linspace(0.0, 1.0, samples) for _ in range(self.dim)]
        _, J = self.eval_grid(pts)
        det = np.linalg.det(J)
        if np.any(det == 0) or (det.max() > 0) == (det.min() < 0):
            raise GeometryError("geometry map is not bijective (Jacobian sign changes)")
        return float(np.sign(det.flat[0]))


def eval_map(geo, xi):
    """Physical point and Jacobian of a geometry map at `xi`."""
    return geo.eval(xi)


@dataclass(frozen=True, order=True)
class Side:
    """One face of the parameter cube: fixed `axis` at `end` (0 or 1)."""

    axis: int
    end: int

    def tangential_axes(self, dim):
        return tuple(a for a in range(dim) if a != self.axis)


@dataclass(frozen=True)
class Orientation:
    """Tangential reparameterization between two matched sides.

    Coordinates t of the first side map to coordinates s of the second via
    s[perm[i]] = 1 - t[i] if flips[i] else t[i].
    """

    perm: tuple
    flips: tuple

    def apply(self, t):
        t = np.asarray(t, dtype=float)
        s = np.empty_like(t)
        for i, p in enumerate(self.perm):
            s[..., p] = 1.0 - t[..., i] if self.flips[i] else t[..., i]
        return s

    @property
    def is_identity(self):
        return self.perm == tuple(range(len(self.perm))) and not any(self.flips)


def _all_orientations(m):
    for perm in itertools.permutations(range(m)):
        for flips in itertools.product((False, True), repeat=m):
            yield Orientation(perm, flips)


@dataclass(frozen=True)
class Interface:
    """Matched pair of patch sides (k < l) with tangential orientation."""

    k: int
    l: int
    side_k: Side
    side_l: Side
    orientation: Orientation


def _side_param_point(side, t, dim):
    xi = np.empty(dim)
    xi[side.axis] = float(side.end)
    for i, ax in enumerate(side.tangential_axes(dim)):
        xi[ax] = t[i]
    return xi


def side_point(geo, side, t):
    """Physical point of a side at tangential coordinates t."""
    return geo.eval(_side_param_point(side, np.atleast_1d(t), geo.dim))[0]


def _side_corner_points(geo, side):
    m = geo.dim - 1
    corners = {}
    for bits in itertools.product((0.0, 1.0), repeat=m):
        corners[bits] = side_point(geo, side, np.array(bits))
    return corners


def _sides(dim):
    return [Side(a, e) for a in range(dim) for e in (0, 1)]


def _match_sides(geo_k, side_k, geo_l, side_l, tol, grid=5):
    """Try to match two sides; returns the Orientation or None.

    Returns the string "partial" when the sides agree on some corners and
    sample points but are not a full match (Assumption-1 violation).
    """
    m = geo_k.dim - 1
    ck = _side_corner_points(geo_k, side_k)
    cl = _side_corner_points(geo_l, side_l)
    partial_evidence = any(
        np.linalg.norm(pk - pl) <= tol for pk in ck.values() for pl in cl.values()
    )
    for orient in _all_orientations(m):
        ok = True
        for bits, pk in ck.items():
            s = orient.apply(np.asarray(bits, dtype=float))
            pl = cl[tuple(np.round(s).astype(int).astype(float))]
            if np.linalg.norm(pk - pl) > tol:
                ok = False
                break
        if not ok:
            continue
        ts = np.linspace(0.0, 1.0, grid)
        agree = True
        for tc in itertools.product(ts, repeat=m):
            t = np.asarray(tc)
            pk = side_point(geo_k, side_k, t)
            pl = side_point(geo_l, side_l, orient.apply(t))
            if np.linalg.norm(pk - pl) > tol:
                agree = False
                break
        if agree:
            return orient
        partial_evidence = True
    if partial_evidence and _sides_share_more_than_a_corner(
        geo_k, side_k, geo_l, side_l, tol
    ):
        return "partial"
    return None


def _sides_share_more_than_a_corner(geo_k, side_k, geo_l, side_l, tol, grid=9):
    """True if non-corner points of one side lie on the other side."""
    m = geo_k.dim - 1
    ts = np.linspace(0.0, 1.0, grid)
    pts_l = np.array([
        side_point(geo_l, side_l, np.asarray(tc))
        for tc in itertools.product(ts, repeat=m)
    ])
    hits = 0
    interior = np.linspace(0.1, 0.9, grid)
    for tc in itertools.product(interior, repeat=m):
        pk = side_point(geo_k, side_k, np.asarray(tc))
        if np.min(np.linalg.norm(pts_l - pk, axis=1)) <= 10 * tol:
            hits += 1
    return hits > 0


def _patches_overlap(geo_k, geo_l, tol=1e-9):
    """Sample interior points of one patch and invert them in the other."""
    d = geo_k.dim
    lo_k, hi_k = _bbox(geo_k)
    lo_l, hi_l = _bbox(geo_l)
    if np.any(lo_k >= hi_l - tol) or np.any(lo_l >= hi_k - tol):
        return False
    pts = [np.linspace(0.15, 0.85, 3) for _ in range(d)]
    X, _ = geo_k.eval_grid(pts)
    for x in X.reshape(-1, d):
        xi = _invert(geo_l, x)
        if xi is not None and np.all(xi > 1e-6) and np.all(xi < 1 - 1e-6):
            return True
    return False


def _bbox(geo):
    pts = [np.linspace(0.0, 1.0, 5) for _ in range(geo.dim)]
    X, _ = geo.eval_grid(pts)
    X = X.reshape(-1, geo.dim)
    return X.min(axis=0), X.max(axis=0)


def _invert(geo, x, tol=1e-10, max_iter=40):
    xi = np.full(geo.dim, 0.5)
    for _ in range(max_iter):
        p, J = geo.eval(np.clip(xi, 0.0, 1.0))
        r = x - p
        if np.linalg.norm(r) <= tol:
            return xi
        try:
            step = np.linalg.solve(J, r)
        except np.linalg.LinAlgError:
            return None
        xi = np.clip(xi + step, -0.25, 1.25)
    return None


@dataclass(frozen=True)
class MultiPatchDomain:
    """Non-overlapping patches plus interface/boundary topology."""

    patches: tuple
    interfaces: tuple
    boundary: tuple  # (patch index, Side) pairs

    @property
    def dim(self):
        return self.patches[0].dim

    @property
    def num_patches(self):
        return len(self.patches)

    def interfaces_of_patch(self, k):
        return [i for i in self.interfaces if k in (i.k, i.l)]

    def side_role(self, k, side):
        """'boundary' or the Interface this side belongs to."""
        for iface in self.interfaces:
            if (iface.k == k and iface.side_k == side) or (
                iface.l == k and iface.side_l == side
            ):
                return iface
        return "boundary"

    def verify_interfaces(self, tol=MATCH_TOL, grid=33):
        """Pointwise agreement of every interface on a dense tangential grid."""
        m = self.dim - 1
        worst = 0.0
        for iface in self.interfaces:
            gk, gl = self.patches[iface.k], self.patches[iface.l]
            ts = np.linspace(0.0, 1.0, grid)
            for tc in itertools.product(ts, repeat=m):
                t = np.asarray(tc)
                pk = side_point(gk, iface.side_k, t)
                pl = side_point(gl, iface.side_l, iface.orientation.apply(t))
                worst = max(worst, float(np.linalg.norm(pk - pl)))
        if worst > tol:
            raise GeometryError(f"interface mismatch {worst:.3e} exceeds {tol}")
        return worst


def detect_interfaces(patches, tol=MATCH_TOL):
    """Build a MultiPatchDomain from bare patches by matching sides.

    Sides whose images coincide pointwise become interfaces; partially
    matching sides and overlapping patches raise GeometryError.
    """
    patches = tuple(patches)
    if not patches:
        raise GeometryError("need at least one patch")
    dim = patches[0].dim
    if any(p.dim != dim for p in patches):
        raise GeometryError("all patches must have the same spatial dimension")
    for p in patches:
        p.jacobian_sign_check()

    interfaces = []
    used = {}
    for k in range(len(patches)):
        for l in range(k + 1, len(patches)):
            if _patches_overlap(patches[k], patches[l]):
                raise GeometryError(f"patches {k} and {l} overlap")
            for side_k in _sides(dim):
                for side_l in _sides(dim):
                    res = _match_sides(patches[k], side_k, patches[l], side_l, tol)
                    if res is None:
                        continue
                    if res == "partial":
                        raise GeometryError(
                            f"sides of patches {k} and {l} match only partially "
                            "(hanging interface violates the mesh assumption)"
                        )
                    for key in ((k, side_k), (l, side_l)):
                        if key in used:
                            raise GeometryError(
                                f"patch side {key} matched twice; patches overlap"
                            )
                        used[key] = True
                    interfaces.append(Interface(k, l, side_k, side_l, res))
    interfaces.sort(key=lambda i: (i.k, i.l, i.side_k, i.side_l))
    boundary = [
        (k, side)
        for k in range(len(patches))
        for side in _sides(dim)
        if (k, side) not in used
    ]
    return MultiPatchDomain(patches, tuple(interfaces), tuple(boundary))


# -- builders ----------------------------------------------------------------


def _box_patch(lo, hi):
    """Axis-aligned box as a multilinear map."""
    lo, hi = np.asarray(lo, dtype=float), np.asarray(hi, dtype=float)
    d = len(lo)
    spaces = tuple(bs.open_knot_vector(1, 1, 0) for _ in range(d))
    grids = np.meshgrid(*[[lo[a], hi[a]] for a in range(d)], indexing="ij")
    cp = np.stack(grids, axis=-1)
    return GeometryMap(spaces, cp)


def unit_square():
    return detect_interfaces([_box_patch((0, 0), (1, 1))])


def l_shape():
    """[0,2]^2 minus (1,2)^2 as three unit-square patches."""
    return detect_interfaces(
        [
            _box_patch((0, 0), (1, 1)),
            _box_patch((1, 0), (2, 1)),
            _box_patch((0, 1), (1, 2)),
        ]
    )


def fichera():
    """[0,2]^3 minus (1,2)^3 as seven unit-cube patches."""
    cubes = [
        _box_patch(off, np.asarray(off) + 1.0)
        for off in itertools.product((0.0, 1.0), repeat=3)
        if off != (1.0, 1.0, 1.0)
    ]
    return detect_interfaces(cubes)


def square_grid(rows, cols):
    return distorted_grid(rows, cols, 0.0, 0)


def distorted_grid(rows, cols, amplitude, seed):
    """rows x cols bilinear patches on [0,cols] x [0,rows].

    Interior lattice nodes are shifted by deterministic uniform offsets in
    [-amplitude, amplitude]^2, so interfaces (straight segments between
    shared nodes) keep matching pointwise.  Raises if the distortion makes
    any patch non-bijective.
    """
    if rows < 1 or cols < 1:
        raise GeometryError("grid must have at least one row and column")
    rng = np.random.default_rng(seed)
    nodes = np.empty((cols + 1, rows + 1, 2))
    for i in range(cols + 1):
        for j in range(rows + 1):
            offset = rng.uniform(-amplitude, amplitude, size=2)
            if i in (0, cols) or j in (0, rows):
                offset = np.zeros(2)
            nodes[i, j] = (i + offset[0], j + offset[1])
    patches = []
    for r in range(rows):
        for c in range(cols):
            spaces = (bs.open_knot_vector(1, 1, 0), bs.open_knot_vector(1, 1, 0))
            cp = np.array(
                [
                    [nodes[c, r], nodes[c, r + 1]],
                    [nodes[c + 1, r], nodes[c + 1, r + 1]],
                ]
            )
            patch = GeometryMap(spaces, cp)
            patch.jacobian_sign_check()
            patches.append(patch)
    return detect_interfaces(patches)


# -- text file format --------------------------------------------------------


def write_geometry(path, domain):
    """Plain-text multipatch format; interfaces are re-detected on read."""
    with open(path, "w") as fh:
        fh.write("igamg-geometry 1\n")
        fh.write(f"npatches {domain.num_patches}\n")
        for k, patch in enumerate(domain.patches):
            d = patch.dim
            fh.write(f"patch {k}\n")
            fh.write(f"dim {d}\n")
            fh.write("degrees " + " ".join(str(s.degree) for s in patch.spaces) + "\n")
            for s in patch.spaces:
                fh.write("knots " + " ".join(f"{x:.17g}" for x in s.knots) + "\n")
            cp = patch.control_points.reshape(-1, d)
            fh.write(f"controlpoints {cp.shape[0]}\n")
            for row in cp:
                fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
            if patch.weights is not None:
                fh.write("weights " + " ".join(
                    f"{x:.17g}" for x in patch.weights.ravel()) + "\n")
            fh.write("endpatch\n")


def read_geometry(path):
    with open(path) as fh:
        tokens = fh.read().split("\n")
    lines = [ln.strip() for ln in tokens if ln.strip() and not ln.startswith("#")]
    if not lines or not lines[0].startswith("igamg-geometry"):
        raise GeometryError(f"{path}: not an igamg geometry file")
    pos = 1
    npatches = int(lines[pos].split()[1])
    pos += 1
    patches = []
    for _ in range(npatches):
        if not lines[pos].startswith("patch"):
            raise GeometryError(f"{path}: expected 'patch', got {lines[pos]!r}")
        pos += 1
        d = int(lines[pos].split()[1])
        pos += 1
        degrees = [int(t) for t in lines[pos].split()[1:]]
        pos += 1
        spaces = []
        for a in range(d):
            knots = np.array([float(t) for t in lines[pos].split()[1:]])
            spaces.append(bs.UnivariateSplineSpace(degrees[a], knots))
            pos += 1
        ncp = int(lines[pos].split()[1])
        pos += 1
        cp = np.array(
            [[float(t) for t in lines[pos + i].split()] for i in range(ncp)]
        )
        pos += ncp
        weights = None
        if lines[pos].startswith("weights"):
            weights = np.array([float(t) for t in lines[pos].split()[1:]])
            pos += 1
        if lines[pos] != "endpatch":
            raise GeometryError(f"{path}: expected 'endpatch', got {lines[pos]!r}")
        pos += 1
        dims = tuple(s.n for s in spaces)
        patches.append(
            GeometryMap(
                tuple(spaces),
                cp.reshape(dims + (d,)),
                weights.reshape(dims) if weights is not None else None,
            )
        )
    return detect_interfaces(patches)
