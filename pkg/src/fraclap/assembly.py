"""Kernel definitions and stiffness/mass/load assembly for (-Delta)^s.

Entry decomposition.  With k(x,y) = |x-y|^{-d-2s} and hats phi_i, the double
integral of a(phi_i, phi_j) over all ordered cell pairs splits into

  * touching pairs (identical / common edge / common vertex): evaluated by the
    singular rules of :mod:`fraclap.quadrature`,
  * disjoint-pair cross terms  -C * int_K phi_i(x) k(x,y) phi_j(y) dy dx,
  * disjoint-pair diagonal terms  C * int_K phi_i phi_j(x) Psi_K(x) dx, where
    Psi_K(x) = sum over cells not touching K of int k(x,y) dy.

Psi_K is evaluated exactly via the divergence identity
k = (1/2s) div_y ((x-y)|x-y|^{-d-2s}): summing the per-cell flux over all cells
outside the one-ring N(K) telescopes to boundary integrals over the domain
boundary and over the ring boundary of N(K).  The domain-boundary flux V(x) is
the same edge potential that the bilinear form's boundary term needs, so both
share one evaluation (direct for near edges, Chebyshev-compressed for far
edges when a cluster operator drives the assembly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.special import gammaln

from .mesh import Mesh, DofMap
from .quadrature import (PairTopology, OrderParams, QuadratureError, classify_pair,
                         gauss_legendre, pair_rule, reference_payload, select_order,
                         simplex_rule)

CHUNK = 2048         # pair-batch chunk size
NODE_BUDGET = 6_000_000   # max pair-chunk size in kernel evaluations


def _chunk_for(n_nodes):
    return max(8, min(CHUNK, NODE_BUDGET // max(n_nodes, 1)))
EDGE_GL_ORDER = 8    # direct quadrature order on boundary / ring edges
DENSE_LIMIT = 4000


class Variant(Enum):
    INTEGRAL = "integral"
    REGIONAL = "regional"
    SYMMETRIZED = "symmetrized"


class AssemblyError(RuntimeError):
    pass


def normalisation(d: int, s: float) -> float:
    """C(d,s) = 2^{2s} s Gamma(s+d/2) / (pi^{d/2} Gamma(1-s))."""
    if not 0.0 < s < 1.0:
        raise ValueError("s must lie in (0,1)")
    return float(2.0 ** (2 * s) * s
                 * math.exp(gammaln(s + d / 2) - gammaln(1.0 - s))
                 / math.pi ** (d / 2))


@dataclass
class FractionalKernel:
    d: int
    s: float
    variant: Variant = Variant.INTEGRAL
    sym_matrix: np.ndarray | None = None   # orthogonal B with B^K = Id
    sym_order: int = 1

    def __post_init__(self):
        self.C_ds = normalisation(self.d, self.s)
        if self.variant is Variant.SYMMETRIZED:
            B = np.asarray(self.sym_matrix, float)
            P = np.linalg.matrix_power(B, self.sym_order)
            if not np.allclose(P, np.eye(self.d), atol=1e-12):
                raise ValueError("sym_matrix^sym_order must be the identity")
            self.sym_matrix = B

    @property
    def exponent(self):
        return -(self.d / 2.0 + self.s)

    def images(self):
        """Orthogonal images B^i, i = 0..K-1 (identity only unless symmetrized)."""
        if self.variant is not Variant.SYMMETRIZED:
            return [np.eye(self.d)]
        out = [np.eye(self.d)]
        for _ in range(self.sym_order - 1):
            out.append(self.sym_matrix @ out[-1])
        return out


# --------------------------------------------------------------- local bases

@lru_cache(maxsize=None)
def _hat_difference(topology: PairTopology, d: int, k: int, s: float):
    """Reference hat-difference matrix D (N, nloc) so that entries are
    J * einsum('na,nb,n,n->ab', D, D, w, kern)."""
    p = reference_payload(topology, k, s, d)
    if d == 1:
        x, y = p["x"], p["y"]
        if topology is PairTopology.IDENTICAL:
            D = np.stack([(1 - x) - (1 - y), x - y], axis=1)
        elif topology is PairTopology.COMMON_VERTEX:
            # both cells parametrized away from the shared vertex
            D = np.stack([(1 - x) - (1 - y), x, -y], axis=1)
        else:
            D = np.stack([1 - x, x, -(1 - y), -y], axis=1)
        return D
    lx = np.stack([1 - p["x"][:, 0] - p["x"][:, 1], p["x"][:, 0], p["x"][:, 1]], axis=1)
    ly = np.stack([1 - p["y"][:, 0] - p["y"][:, 1], p["y"][:, 0], p["y"][:, 1]], axis=1)
    if topology is PairTopology.IDENTICAL:
        return lx - ly
    if topology is PairTopology.COMMON_EDGE:
        # locals: shared0, shared1, third of K, third of K~
        return np.stack([lx[:, 0] - ly[:, 0], lx[:, 1] - ly[:, 1],
                         lx[:, 2], -ly[:, 2]], axis=1)
    if topology is PairTopology.COMMON_VERTEX:
        return np.stack([lx[:, 0] - ly[:, 0], lx[:, 1], lx[:, 2],
                         -ly[:, 1], -ly[:, 2]], axis=1)
    # disjoint
    return np.concatenate([lx, -ly], axis=1)


def _map_points(P, u):
    """P (B, d+1, d) cell vertices; u (N, d) reference -> (B, N, d) physical."""
    E = P[:, 1:] - P[:, 0:1]                     # (B, d, d) edge vectors
    return P[:, 0:1, :] + u @ E


def _jacobians(P):
    if P.shape[2] == 1:
        return np.abs(P[:, 1, 0] - P[:, 0, 0])
    a = P[:, 1] - P[:, 0]
    b = P[:, 2] - P[:, 0]
    return np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])


def pair_matrices(topology: PairTopology, PK, PK2, s: float, k: int):
    """Local matrices (B, nloc, nloc) of int int (phi_a(x)-phi_a(y))(phi_b ...) k
    for a batch of canonically ordered cell pairs."""
    d = PK.shape[2]
    p = reference_payload(topology, k, s, d)
    D = _hat_difference(topology, d, k, s)
    ex = -(d / 2.0 + s)
    if d == 1:
        xh = p["x"][:, None]
        yh = p["y"][:, None]
    else:
        xh, yh = p["x"], p["y"]
    w = p["w"]
    JK = _jacobians(PK)
    JK2 = JK if topology is PairTopology.IDENTICAL else _jacobians(PK2)
    out = np.empty((len(PK), D.shape[1], D.shape[1]))
    DW = D * w[:, None]
    step = _chunk_for(len(w))
    for lo in range(0, len(PK), step):
        hi = min(lo + step, len(PK))
        X = _map_points(PK[lo:hi], xh)
        Y = _map_points(PK[lo:hi] if topology is PairTopology.IDENTICAL else PK2[lo:hi], yh)
        r2 = np.sum((X - Y) ** 2, axis=-1)
        kern = r2 ** ex
        out[lo:hi] = np.einsum("pn,na,nb->pab", kern, DW, D, optimize=True)
    out *= (JK * JK2)[:, None, None]
    return out


def cross_matrices(PK, PK2, s: float, k: int):
    """(B, d+1, d+1) matrices M[a,b] = int_K phi_a(x) k(x,y) phi_b(y) for
    disjoint pairs (plain tensor Gauss)."""
    d = PK.shape[2]
    p = reference_payload(PairTopology.DISJOINT, k, s, d)
    ex = -(d / 2.0 + s)
    if d == 1:
        xh = p["x"].reshape(-1, 1)
        yh = p["y"].reshape(-1, 1)
        lx = np.stack([1 - xh[:, 0], xh[:, 0]], axis=1)
        ly = np.stack([1 - yh[:, 0], yh[:, 0]], axis=1)
    else:
        xh, yh = p["x"], p["y"]
        lx = np.stack([1 - xh[:, 0] - xh[:, 1], xh[:, 0], xh[:, 1]], axis=1)
        ly = np.stack([1 - yh[:, 0] - yh[:, 1], yh[:, 0], yh[:, 1]], axis=1)
    w = p["w"]
    JK = _jacobians(PK)
    JK2 = _jacobians(PK2)
    # tensor structure: nodes are (x_q) x (y_r); contract as two matmuls
    pxq, wxq = simplex_rule(d, k)
    pyq, wyq = simplex_rule(d, k)
    if d == 1:
        lxs = np.stack([1 - pxq[:, 0], pxq[:, 0]], axis=1)
        lys = np.stack([1 - pyq[:, 0], pyq[:, 0]], axis=1)
    else:
        lxs = np.stack([1 - pxq[:, 0] - pxq[:, 1], pxq[:, 0], pxq[:, 1]], axis=1)
        lys = np.stack([1 - pyq[:, 0] - pyq[:, 1], pyq[:, 0], pyq[:, 1]], axis=1)
    LWx = lxs * wxq[:, None]
    LWy = lys * wyq[:, None]
    out = np.empty((len(PK), lxs.shape[1], lys.shape[1]))
    step = _chunk_for(len(wxq) * len(wyq))
    # single precision for the large smooth groups: their truncation error
    # already sits near 1e-6 and the f32 kernel is twice as fast
    use32 = len(wxq) * len(wyq) >= 1000
    for lo in range(0, len(PK), step):
        hi = min(lo + step, len(PK))
        X = _map_points(PK[lo:hi], pxq)        # (B, qx, d)
        Y = _map_points(PK2[lo:hi], pyq)       # (B, qy, d)
        # r2 via norms and one batched matmul (BLAS path); shift each pair to
        # its own frame first so the cancellation error scales with the local
        # cell size, not the global coordinates
        cshift = 0.5 * (X.mean(axis=1) + Y.mean(axis=1))
        X = X - cshift[:, None, :]
        Y = Y - cshift[:, None, :]
        nx = np.einsum("pxd,pxd->px", X, X)
        ny = np.einsum("pyd,pyd->py", Y, Y)
        r2 = nx[:, :, None] + ny[:, None, :] - 2.0 * (X @ Y.transpose(0, 2, 1))
        np.maximum(r2, 1e-300, out=r2)
        if use32:
            kern = r2.astype(np.float32) ** np.float32(ex)
        else:
            kern = r2 ** ex
        B = hi - lo
        tmp = kern.reshape(-1, kern.shape[2]) @ LWy.astype(kern.dtype)
        tmp = tmp.reshape(B, -1, LWy.shape[1])
        out[lo:hi] = LWx.astype(kern.dtype).T @ tmp
    out *= (JK * JK2)[:, None, None]
    return out


def boundary_pair_matrices(topology: PairTopology, PK, PE, NE, s: float, k: int,
                           vanishing: int):
    """(B, d+1, d+1) matrices of int_K int_e phi_a phi_b(x) n_in.(x-y) k dy dx
    for touching cell x boundary-edge pairs, canonically ordered.

    NE are INWARD unit normals (pointing into the domain)."""
    d = PK.shape[2]
    p = reference_payload(topology, k, s, d, vanishing)
    ex = -(d / 2.0 + s)
    if d == 1:
        # cell parametrized from the boundary point; PE (B, 1, 1), NE (B, 1)
        xh = p["x"]
        lam = np.stack([1 - xh, xh], axis=1)  # locals: (boundary end, far end)
        w = p["w"]
        JK = _jacobians(PK)
        out = np.empty((len(PK), 2, 2))
        step = _chunk_for(len(w))
        for lo in range(0, len(PK), step):
            hi = min(lo + step, len(PK))
            pnt = PE[lo:hi, 0, 0]
            far = np.where(np.isclose(PK[lo:hi, 0, 0], pnt), PK[lo:hi, 1, 0], PK[lo:hi, 0, 0])
            X = pnt[:, None] + xh[None, :] * (far - pnt)[:, None]
            diff = X - pnt[:, None]
            ndot = NE[lo:hi, 0][:, None] * diff
            kern = np.abs(diff) ** (2 * ex) * ndot
            out[lo:hi] = np.einsum("pn,na,nb->pab", kern, lam * w[:, None], lam, optimize=True)
        out *= JK[:, None, None]
        return out
    lam = np.stack([1 - p["x"][:, 0] - p["x"][:, 1], p["x"][:, 0], p["x"][:, 1]], axis=1)
    w = p["w"]
    JK = _jacobians(PK)
    LE = np.linalg.norm(PE[:, 1] - PE[:, 0], axis=1)
    out = np.empty((len(PK), 3, 3))
    LW = lam * w[:, None]
    step = _chunk_for(len(w))
    for lo in range(0, len(PK), step):
        hi = min(lo + step, len(PK))
        X = _map_points(PK[lo:hi], p["x"])
        Y = PE[lo:hi, 0, None, :] + p["a"][None, :, None] * (PE[lo:hi, 1] - PE[lo:hi, 0])[:, None, :]
        diff = X - Y
        r2 = np.sum(diff ** 2, axis=-1)
        ndot = np.einsum("pnd,pd->pn", diff, NE[lo:hi])
        kern = r2 ** ex * ndot
        out[lo:hi] = np.einsum("pn,na,nb->pab", kern, LW, lam, optimize=True)
    out *= (JK * LE)[:, None, None]
    return out


# --------------------------------------------------- cell quadrature helpers

@lru_cache(maxsize=None)
def _ref_cell_rule(d: int, order: int):
    pts, w = simplex_rule(d, order)
    if d == 1:
        lam = np.stack([1 - pts[:, 0], pts[:, 0]], axis=1)
    else:
        lam = np.stack([1 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=1)
    return pts, w, lam


def cell_quadrature(mesh: Mesh, order: int):
    """Physical nodes (nc, q, d), weights (nc, q) incl. Jacobian, hats (q, d+1)."""
    pts, w, lam = _ref_cell_rule(mesh.d, order)
    P = mesh.cell_coords()
    X = _map_points(P, pts)
    W = np.outer(_jacobians(P), w)
    return X, W, lam


# -------------------------------------------------------- boundary potentials

def edge_flux_potential(X, edges_p0, edges_p1, normals, s, order=EDGE_GL_ORDER,
                        d=2, images=None):
    """sum_e int_e n_e.(x-y)|x-y|^{-d-2s} dy at points X (..., d).

    ``normals`` may be any consistent orientation; the caller fixes the sign.
    In 1D edges are points (edges_p0 only) and the integral is a point value.
    """
    Xf = X.reshape(-1, d)
    out = np.zeros(len(Xf))
    ims = [np.eye(d)] if images is None else images
    ex = -(d / 2.0 + s)
    for B in ims:
        p0 = edges_p0 @ B.T
        if d == 1:
            diff = Xf[:, None, :] - p0[None, :, :]
            nd = np.einsum("xed,ed->xe", diff, normals @ B.T)
            r2 = np.sum(diff ** 2, axis=-1)
            out += np.sum(nd * r2 ** ex, axis=1)
            continue
        p1 = edges_p1 @ B.T
        nrm = normals @ B.T
        gl_x, gl_w = gauss_legendre(order)
        Y = p0[:, None, :] + gl_x[None, :, None] * (p1 - p0)[:, None, :]   # (E,q,d)
        L = np.linalg.norm(p1 - p0, axis=1)
        for lo in range(0, len(Xf), 4096):
            hi = min(lo + 4096, len(Xf))
            diff = Xf[lo:hi, None, None, :] - Y[None, :, :, :]
            r2 = np.sum(diff ** 2, axis=-1)
            nd = np.einsum("xeqd,ed->xeq", diff, nrm)
            out[lo:hi] += np.einsum("xeq,q,e->x", nd * r2 ** ex, gl_w, L, optimize=True)
    return out.reshape(X.shape[:-1])


def ring_boundaries(mesh: Mesh):
    """Per cell: oriented edge list of the one-ring boundary d(N(K)).

    Returns (p0, p1, nrm, offsets): edge start/end coords and outward unit
    normals of N(K), concatenated, with offsets[c]:offsets[c+1] addressing
    cell c's ring edges.  1D: p0 holds the two interval ends with nrm = +-1.
    """
    offs, pdata = mesh.patch_arrays()
    cells = mesh.cells
    if mesh.d == 1:
        x = mesh.vertices[:, 0]
        p0 = []
        nrm = []
        offsets = [0]
        for c in range(mesh.num_cells):
            nb = np.unique(np.concatenate([pdata[offs[v]:offs[v + 1]] for v in cells[c]]))
            lo = x[cells[nb]].min()
            hi = x[cells[nb]].max()
            p0 += [[lo], [hi]]
            nrm += [[-1.0], [1.0]]
            offsets.append(len(p0))
        return (np.asarray(p0), np.asarray(p0), np.asarray(nrm),
                np.asarray(offsets, np.int64))
    p0, p1, nrm = [], [], []
    offsets = [0]
    V = mesh.vertices
    for c in range(mesh.num_cells):
        nb = np.unique(np.concatenate([pdata[offs[v]:offs[v + 1]] for v in cells[c]]))
        tri = cells[nb]
        raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        key = np.sort(raw, axis=1)
        uniq, cnt = np.unique(key, axis=0, return_counts=True)
        ring = uniq[cnt == 1]
        cen = V[np.unique(tri)].mean(axis=0)
        for (a, b) in ring:
            pa, pb = V[a], V[b]
            t = pb - pa
            n = np.array([t[1], -t[0]])
            n /= np.linalg.norm(n)
            if (0.5 * (pa + pb) - cen) @ n < 0:
                n = -n
            p0.append(pa); p1.append(pb); nrm.append(n)
        offsets.append(len(p0))
    return (np.asarray(p0), np.asarray(p1), np.asarray(nrm),
            np.asarray(offsets, np.int64))


def tail_potential(mesh: Mesh, s: float, X, V_bdry, rings=None):
    """Psi_K(x) at per-cell nodes X (nc, q, d): the integral of the kernel over
    all cells outside the one-ring of K, via the divergence identity.

    V_bdry is the domain-boundary flux potential at the same nodes (outward
    normals).  Psi = (V_bdry - ring flux) / (2s).
    """
    p0, p1, nrm, offsets = rings if rings is not None else ring_boundaries(mesh)
    nc, q, d = X.shape
    ring_flux = np.empty((nc, q))
    for c in range(nc):
        sl = slice(offsets[c], offsets[c + 1])
        ring_flux[c] = edge_flux_potential(X[c], p0[sl], p1[sl], nrm[sl], s, d=d)
    return (V_bdry - ring_flux) / (2 * s)


def weighted_mass_triplets(mesh: Mesh, dofmap: DofMap, X, W, lam, values):
    """COO triplets of int_K phi_a phi_b(x) * values(x) for all cells."""
    loc = np.einsum("cq,qa,qb->cab", W * values, lam, lam, optimize=True)
    gd = dofmap.cell_dofs  # (nc, d+1)
    nl = gd.shape[1]
    ii = np.repeat(gd[:, :, None], nl, axis=2)
    jj = np.repeat(gd[:, None, :], nl, axis=1)
    mask = (ii >= 0) & (jj >= 0)
    return ii[mask], jj[mask], loc[mask]


# ------------------------------------------------------------- touching pairs

def enumerate_touching_pairs(mesh: Mesh):
    """Unordered pairs of distinct cells sharing at least one vertex, classified."""
    offs, pdata = mesh.patch_arrays()
    pairs = set()
    for v in range(mesh.num_vertices):
        cs = pdata[offs[v]:offs[v + 1]]
        for a in range(len(cs)):
            for b in range(a + 1, len(cs)):
                pairs.add((min(cs[a], cs[b]), max(cs[a], cs[b])))
    if not pairs:
        return (np.zeros((0, 2), np.int64),) * 1
    return np.asarray(sorted(pairs), dtype=np.int64)


def canonicalize_touching(mesh: Mesh, pairs):
    """Split touching cell pairs by topology and produce canonical vertex orders.

    Returns dict topology -> (verts_K (B,d+1), verts_K2 (B,d+1), locals (B,nloc))
    where ``locals`` lists the global vertex index behind each local basis slot.
    """
    cells = mesh.cells
    out = {}
    if mesh.d == 1:
        A = cells[pairs[:, 0]]
        Bc = cells[pairs[:, 1]]
        shared = np.where(A[:, 0:1] == Bc, A[:, 0:1], -1).max(axis=1)
        shared = np.maximum(shared, np.where(A[:, 1:2] == Bc, A[:, 1:2], -1).max(axis=1))
        vK = np.where((A[:, 0] == shared)[:, None],
                      np.stack([A[:, 0], A[:, 1]], 1),
                      np.stack([A[:, 1], A[:, 0]], 1))
        vK2 = np.where((Bc[:, 0] == shared)[:, None],
                       np.stack([Bc[:, 0], Bc[:, 1]], 1),
                       np.stack([Bc[:, 1], Bc[:, 0]], 1))
        locs = np.stack([shared, vK[:, 1], vK2[:, 1]], axis=1)
        out[PairTopology.COMMON_VERTEX] = (vK, vK2, locs)
        return out
    A = cells[pairs[:, 0]]
    Bc = cells[pairs[:, 1]]
    sh = np.zeros((len(pairs), 3), np.int64)
    nsh = np.zeros(len(pairs), np.int64)
    for r in range(len(pairs)):
        common = sorted(set(A[r]) & set(Bc[r]))
        nsh[r] = len(common)
        sh[r, :len(common)] = common
    for topo, count in ((PairTopology.COMMON_EDGE, 2), (PairTopology.COMMON_VERTEX, 1)):
        sel = np.nonzero(nsh == count)[0]
        if not len(sel):
            continue
        vK = np.empty((len(sel), 3), np.int64)
        vK2 = np.empty((len(sel), 3), np.int64)
        for t, r in enumerate(sel):
            common = list(sh[r, :count])
            restA = [v for v in A[r] if v not in common]
            restB = [v for v in Bc[r] if v not in common]
            vK[t] = common + restA
            vK2[t] = common + restB
        if topo is PairTopology.COMMON_EDGE:
            locs = np.concatenate([vK, vK2[:, 2:3]], axis=1)       # 4 locals
        else:
            locs = np.concatenate([vK, vK2[:, 1:3]], axis=1)       # 5 locals
        out[topo] = (vK, vK2, locs)
    return out


# --------------------------------------------------------------- public ops

def entry_pair(kernel: FractionalKernel, PK, PK2, hat_i, hat_j, rule):
    """Reference path for a single a^{KxK'} contribution (no C/2 factor).

    hat_i / hat_j are (value-at-K-vertices, value-at-K2-vertices) nodal tuples.
    """
    PK = np.asarray(PK, float).reshape(-1, kernel.d)
    PK2 = np.asarray(PK2, float).reshape(-1, kernel.d)
    vi_K, vi_K2 = [np.asarray(v, float) for v in hat_i]
    vj_K, vj_K2 = [np.asarray(v, float) for v in hat_j]

    def bary(P, pts):
        if kernel.d == 1:
            t = (pts[:, 0] - P[0, 0]) / (P[1, 0] - P[0, 0])
            return np.stack([1 - t, t], axis=1)
        M = np.stack([P[1] - P[0], P[2] - P[0]], axis=1)
        uv = (pts - P[0]) @ np.linalg.inv(M).T
        return np.stack([1 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)

    ident = rule.topology is PairTopology.IDENTICAL

    def g(x, y):
        bx = bary(PK, x.reshape(-1, kernel.d))
        by = bary(PK if ident else PK2, y.reshape(-1, kernel.d))
        fi = bx @ vi_K - by @ (vi_K if ident else vi_K2)
        fj = bx @ vj_K - by @ (vj_K if ident else vj_K2)
        return fi * fj

    return rule.apply_cell_pair(g, PK, PK2)


def entry_boundary(kernel: FractionalKernel, PK, PE, n_inward, hat_i, hat_j, rule):
    """Reference path for a single a^{Kxe} contribution (no C/2s factor)."""
    if kernel.variant is Variant.REGIONAL:
        return 0.0
    PK = np.asarray(PK, float).reshape(-1, kernel.d)
    PE = np.asarray(PE, float).reshape(-1, kernel.d)
    n_inward = np.asarray(n_inward, float).reshape(kernel.d)
    vi = np.asarray(hat_i, float)
    vj = np.asarray(hat_j, float)

    def bary(pts):
        if kernel.d == 1:
            t = (pts[:, 0] - PK[0, 0]) / (PK[1, 0] - PK[0, 0])
            return np.stack([1 - t, t], axis=1)
        M = np.stack([PK[1] - PK[0], PK[2] - PK[0]], axis=1)
        uv = (pts - PK[0]) @ np.linalg.inv(M).T
        return np.stack([1 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)

    def g(x, y):
        x = x.reshape(-1, kernel.d)
        y = y.reshape(-1, kernel.d)
        b = bary(x)
        return (b @ vi) * (b @ vj) * ((x - y) @ n_inward)

    return rule.apply_cell_edge(g, PK, PE)


def assemble_mass(mesh: Mesh, dofmap: DofMap) -> csr_matrix:
    """Standard P1 mass matrix on the dof set."""
    d = mesh.d
    vol = mesh.cell_volumes()
    nl = d + 1
    base = (np.ones((nl, nl)) + np.eye(nl)) / ((d + 1) * (d + 2))
    loc = vol[:, None, None] * base[None]
    gd = dofmap.cell_dofs
    ii = np.repeat(gd[:, :, None], nl, axis=2)
    jj = np.repeat(gd[:, None, :], nl, axis=1)
    mask = (ii >= 0) & (jj >= 0)
    M = coo_matrix((loc[mask], (ii[mask], jj[mask])), shape=(dofmap.n, dofmap.n))
    return M.tocsr()


def load_vector(mesh: Mesh, dofmap: DofMap, f, order=4, discontinuity=None):
    """b_i = int f phi_i, per-cell Gauss; cells crossed by a known discontinuity
    line/point are split along it."""
    d = mesh.d
    b = np.zeros(dofmap.n)

    def accumulate(cells_idx, P):
        pts, w, lam = _ref_cell_rule(d, order)
        X = _map_points(P, pts)
        W = np.outer(_jacobians(P), w)
        fv = np.asarray(f(X.reshape(-1, d))).reshape(len(P), -1)
        loc = np.einsum("cq,qa->ca", W * fv, lam)
        gd = dofmap.cell_dofs[cells_idx] if cells_idx is not None else None
        return loc

    P = mesh.cell_coords()
    if discontinuity is None:
        loc = accumulate(None, P)
        gd = dofmap.cell_dofs
        np.add.at(b, gd[gd >= 0], loc[gd >= 0])
        return b

    point, nvec = discontinuity  # hyperplane n.(x-p)=0
    point = np.asarray(point, float)
    nvec = np.asarray(nvec, float)
    side = np.einsum("cvd,d->cv", P - point, nvec)
    crossed = (side.max(axis=1) > 1e-14) & (side.min(axis=1) < -1e-14)
    plain = np.nonzero(~crossed)[0]
    if len(plain):
        loc = accumulate(plain, P[plain])
        gd = dofmap.cell_dofs[plain]
        np.add.at(b, gd[gd >= 0], loc[gd >= 0])
    for c in np.nonzero(crossed)[0]:
        verts = P[c]
        gd = dofmap.cell_dofs[c]
        for piece, pverts in _split_cell(verts, point, nvec):
            pts, w, lam = _ref_cell_rule(d, order)
            Xp = _map_points(pverts[None], pts)[0]
            Wp = _jacobians(pverts[None])[0] * w
            fv = np.asarray(f(Xp))
            # express original hats at the sub-cell nodes
            lam_orig = _barycentric(verts, Xp)
            loc = (Wp * fv) @ lam_orig
            for a in range(d + 1):
                if gd[a] >= 0:
                    b[gd[a]] += loc[a]
    return b


def _barycentric(verts, pts):
    d = verts.shape[1]
    if d == 1:
        t = (pts[:, 0] - verts[0, 0]) / (verts[1, 0] - verts[0, 0])
        return np.stack([1 - t, t], axis=1)
    M = np.stack([verts[1] - verts[0], verts[2] - verts[0]], axis=1)
    uv = (pts - verts[0]) @ np.linalg.inv(M).T
    return np.stack([1 - uv[:, 0] - uv[:, 1], uv[:, 0], uv[:, 1]], axis=1)


def _split_cell(verts, point, nvec):
    """Split a simplex by the hyperplane n.(x-point)=0 into sub-simplices."""
    d = verts.shape[1]
    sd = (verts - point) @ nvec
    if d == 1:
        a, b = verts[0, 0], verts[1, 0]
        t = sd[0] / (sd[0] - sd[1])
        m = a + t * (b - a)
        return [("lo", np.array([[a], [m]])), ("hi", np.array([[m], [b]]))]
    pos = [i for i in range(3) if sd[i] > 0]
    neg = [i for i in range(3) if sd[i] <= 0]
    lone, pair = (pos, neg) if len(pos) == 1 else (neg, pos)
    i0 = lone[0]
    cuts = []
    for j in pair:
        t = sd[i0] / (sd[i0] - sd[j])
        cuts.append(verts[i0] + t * (verts[j] - verts[i0]))
    c0, c1 = cuts
    tri1 = np.stack([verts[i0], c0, c1])
    tri2 = np.stack([c0, verts[pair[0]], verts[pair[1]]])
    tri3 = np.stack([c0, verts[pair[1]], c1])
    return [("a", tri1), ("b", tri2), ("c", tri3)]


# ===================================================================== driver

XQ_ORDER = {1: 6, 2: 4}


def _scatter(acc, I, J, V):
    acc[0].append(np.asarray(I, np.int64).ravel())
    acc[1].append(np.asarray(J, np.int64).ravel())
    acc[2].append(np.asarray(V, float).ravel())


def _touching_double_triplets(mesh, dofmap, kernel, params, acc, images=None,
                              vertex_ids=None):
    """Raw triplets of the touching-pair double integrals (identical included).

    Weight convention: identical pairs contribute once, distinct unordered
    pairs twice (both orderings of the ordered-pair decomposition).
    """
    s = kernel.s
    d = mesh.d
    n = dofmap.n
    V = mesh.vertices
    diam = mesh.cell_diameters()
    # identical pairs
    P = mesh.cell_coords()
    kT = select_order(PairTopology.IDENTICAL, diam, diam, 0.0, n, s, params, d=d)
    for k in np.unique(kT):
        sel = np.nonzero(kT == k)[0]
        loc = pair_matrices(PairTopology.IDENTICAL, P[sel], P[sel], s, int(k))
        gd = dofmap.cell_dofs[sel]
        nl = gd.shape[1]
        ii = np.repeat(gd[:, :, None], nl, axis=2)
        jj = np.repeat(gd[:, None, :], nl, axis=1)
        mask = (ii >= 0) & (jj >= 0)
        _scatter(acc, ii[mask], jj[mask], loc[mask])
    # touching distinct pairs
    pairs = enumerate_touching_pairs(mesh)
    if len(pairs):
        canon = canonicalize_touching(mesh, pairs)
        hK = diam[pairs[:, 0]]
        hK2 = diam[pairs[:, 1]]
        # recover which rows of `pairs` landed in each topology (same traversal)
        cells = mesh.cells
        nsh = np.array([len(set(cells[a]) & set(cells[b])) for a, b in pairs])
        for topo, (vK, vK2, locs) in canon.items():
            want = 2 if topo is PairTopology.COMMON_EDGE else 1
            rows = np.nonzero(nsh == want)[0] if d == 2 else np.arange(len(pairs))
            ks = select_order(topo, hK[rows], hK2[rows], 0.0, n, s, params, d=d)
            gdof = dofmap.vertex_to_dof[locs]
            for k in np.unique(ks):
                sel = np.nonzero(ks == k)[0]
                loc = pair_matrices(topo, V[vK[sel]], V[vK2[sel]], s, int(k))
                gd = gdof[sel]
                nl = gd.shape[1]
                ii = np.repeat(gd[:, :, None], nl, axis=2)
                jj = np.repeat(gd[:, None, :], nl, axis=1)
                mask = (ii >= 0) & (jj >= 0)
                _scatter(acc, ii[mask], jj[mask], 2.0 * loc[mask])


def _cross_triplets(mesh, dofmap, kernel, params, pa, pb, acc, mask_fn=None,
                    Pb_coords=None, dofs_b=None):
    """Raw cross triplets -2 * int phi_i(x) k phi_j(y) for disjoint pairs
    (pa, pb); scatters both (i,j) and (j,i).  ``mask_fn(I, J)`` restricts to
    near entries when assembling alongside a far field."""
    s = kernel.s
    d = mesh.d
    n = dofmap.n
    diam = mesh.cell_diameters()
    Pa_all = mesh.cell_coords()
    Pb_all = Pa_all if Pb_coords is None else Pb_coords
    hb = diam if Pb_coords is None else _diam_of(Pb_coords)
    dist = _dist_estimate_coords(Pa_all[pa], Pb_all[pb])
    ks = select_order(PairTopology.DISJOINT, diam[pa], hb[pb], np.maximum(dist, 1e-300),
                      n, s, params, d=d)
    gd_a = dofmap.cell_dofs
    gd_b = gd_a if dofs_b is None else dofs_b
    for k in np.unique(ks):
        sel = np.nonzero(ks == k)[0]
        step = max(64, _chunk_for(int(k) ** (2 * d)))
        for lo in range(0, len(sel), step):
            sl = sel[lo:lo + step]
            M = cross_matrices(Pa_all[pa[sl]], Pb_all[pb[sl]], s, int(k))
            ii = np.repeat(gd_a[pa[sl]][:, :, None], d + 1, axis=2)
            jj = np.repeat(gd_b[pb[sl]][:, None, :], d + 1, axis=1)
            mask = (ii >= 0) & (jj >= 0)
            if mask_fn is not None:
                sub = mask.copy()
                sub[mask] = mask_fn(ii[mask], jj[mask])
                mask = sub
            vals = -2.0 * M[mask]
            _scatter(acc, ii[mask], jj[mask], vals)
            _scatter(acc, jj[mask], ii[mask], vals)


def _diam_of(P):
    if P.shape[2] == 1:
        return np.abs(P[:, 1, 0] - P[:, 0, 0])
    e0 = np.linalg.norm(P[:, 1] - P[:, 0], axis=1)
    e1 = np.linalg.norm(P[:, 2] - P[:, 1], axis=1)
    e2 = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
    return np.maximum(e0, np.maximum(e1, e2))


def _point_segment_dist(P, A, B):
    """Distance of points P (...,d) to segments [A,B] (...,d), elementwise."""
    AB = B - A
    t = np.einsum("...d,...d->...", P - A, AB) / np.maximum(
        np.einsum("...d,...d->...", AB, AB), 1e-300)
    t = np.clip(t, 0.0, 1.0)
    proj = A + t[..., None] * AB
    return np.linalg.norm(P - proj, axis=-1)


def _exact_simplex_dist(Pa, Pb):
    d = Pa.shape[2]
    if d == 1:
        lo_a = Pa[:, :, 0].min(axis=1); hi_a = Pa[:, :, 0].max(axis=1)
        lo_b = Pb[:, :, 0].min(axis=1); hi_b = Pb[:, :, 0].max(axis=1)
        return np.maximum(np.maximum(lo_b - hi_a, lo_a - hi_b), 0.0)
    best = np.full(len(Pa), np.inf)
    edges = [(0, 1), (1, 2), (2, 0)]
    for (a0, a1) in edges:
        for (b0, b1) in edges:
            best = np.minimum(best, _point_segment_dist(Pa[:, a0], Pb[:, b0], Pb[:, b1]))
            best = np.minimum(best, _point_segment_dist(Pa[:, a1], Pb[:, b0], Pb[:, b1]))
            best = np.minimum(best, _point_segment_dist(Pb[:, b0], Pa[:, a0], Pa[:, a1]))
            best = np.minimum(best, _point_segment_dist(Pb[:, b1], Pa[:, a0], Pa[:, a1]))
    return best


def _dist_estimate_coords(Pa, Pb):
    """Distance between disjoint simplices: centroid screening, exact segment
    distances only for the close minority (where the order formula is
    sensitive)."""
    d = Pa.shape[2]
    if d == 1:
        return _exact_simplex_dist(Pa, Pb)
    ca = Pa.mean(axis=1)
    cb = Pb.mean(axis=1)
    ra = np.linalg.norm(Pa - ca[:, None, :], axis=2).max(axis=1)
    rb = np.linalg.norm(Pb - cb[:, None, :], axis=2).max(axis=1)
    dc = np.linalg.norm(ca - cb, axis=1)
    lower = dc - ra - rb
    out = np.maximum(lower, 0.0)
    close = lower < 2.0 * (ra + rb)
    if np.any(close):
        out[close] = _exact_simplex_dist(Pa[close], Pb[close])
    return out


def _touching_boundary_triplets(mesh, dofmap, kernel, params, acc_b, touch_T, X):
    """Singular (K, e) boundary contributions + per-cell GL correction T(x) of
    the touching edges (subtracted from the total flux potential later)."""
    s = kernel.s
    d = mesh.d
    n = dofmap.n
    V = mesh.vertices
    E = mesh.boundary_edges
    NRM_IN = -mesh.boundary_normals
    offs, pdata = mesh.patch_arrays()
    vanish = 0 if s < 0.5 else 2
    diam = mesh.cell_diameters()
    groups = {}
    for eix in range(len(E)):
        everts = set(int(v) for v in E[eix])
        cs = np.unique(np.concatenate([pdata[offs[v]:offs[v + 1]] for v in E[eix]]))
        for c in cs:
            shared = everts & set(int(v) for v in mesh.cells[c])
            if len(shared) == d:
                topo = PairTopology.EDGE_OF_CELL
            elif len(shared) >= 1:
                if d == 1:
                    topo = PairTopology.EDGE_OF_CELL
                else:
                    topo = PairTopology.TOUCHING_EDGE
            else:
                continue
            groups.setdefault(topo, []).append((c, eix, tuple(sorted(shared))))
    for topo, items in groups.items():
        cellsel = np.array([c for c, _, _ in items], np.int64)
        edgesel = np.array([e for _, e, _ in items], np.int64)
        ks = select_order(topo, diam[cellsel], diam[cellsel], 0.0, n, s, params,
                          boundary=True, d=d)
        # canonical cell ordering per topology
        PK = np.empty((len(items), d + 1, d))
        locs = np.empty((len(items), d + 1), np.int64)
        PE = np.empty((len(items), max(d, 1), d))
        for t, (c, eix, shared) in enumerate(items):
            cv = list(mesh.cells[c])
            ev = list(E[eix])
            if topo is PairTopology.EDGE_OF_CELL and d == 2:
                rest = [v for v in cv if v not in ev]
                order = ev + rest
            elif topo is PairTopology.TOUCHING_EDGE:
                sharedv = shared[0]
                rest = [v for v in cv if v != sharedv]
                order = [sharedv] + rest
                ev = [sharedv] + [v for v in ev if v != sharedv]
            else:  # 1D edge of cell: boundary point first
                pnt = ev[0]
                rest = [v for v in cv if v != pnt]
                order = [pnt] + rest
            locs[t] = order
            PK[t] = V[order]
            PE[t] = V[ev] if d == 2 else V[[ev[0]]]
        NE = NRM_IN[edgesel]
        gdof = dofmap.vertex_to_dof[locs]
        vv = vanish if topo is PairTopology.EDGE_OF_CELL else 0
        for k in np.unique(ks):
            sel = np.nonzero(ks == k)[0]
            loc = boundary_pair_matrices(topo, PK[sel], PE[sel], NE[sel], s, int(k), vv)
            gd = gdof[sel]
            nl = gd.shape[1]
            ii = np.repeat(gd[:, :, None], nl, axis=2)
            jj = np.repeat(gd[:, None, :], nl, axis=1)
            mask = (ii >= 0) & (jj >= 0)
            _scatter(acc_b, ii[mask], jj[mask], loc[mask])
        # GL correction: same edges evaluated with the plain rule at the cell nodes
        for t, (c, eix, _) in enumerate(items):
            e0 = V[E[eix][0]][None, :]
            e1 = V[E[eix][1]][None, :] if d == 2 else e0
            touch_T[c] += edge_flux_potential(X[c], e0, e1,
                                              mesh.boundary_normals[eix][None, :],
                                              s, d=d)


def assemble_near_field(mesh: Mesh, dofmap: DofMap, kernel: FractionalKernel,
                        near_pairs, params: OrderParams | None = None,
                        V_nodes=None, xquad=None):
    """Near-field sparse matrix over the non-admissible dof pairs.

    ``near_pairs``: a NearStructure (leaf pair list + leaf->cells map).  The
    matrix contains, for every near (i,j): the touching-pair integrals, the
    direct cross terms of disjoint pairs, the kernel-tail mass term, and (for
    the integral variant) the full boundary-edge contribution.
    """
    if kernel.variant is Variant.SYMMETRIZED:
        raise AssemblyError("symmetrized kernels are assembled densely")
    params = params or OrderParams()
    s = kernel.s
    d = mesh.d
    n = dofmap.n
    acc = ([], [], [])
    acc_b = ([], [], [])
    X, W, lam = xquad if xquad is not None else cell_quadrature(mesh, XQ_ORDER[d])

    _touching_double_triplets(mesh, dofmap, kernel, params, acc)

    # direct cross terms within the near horizon, masked to near dof pairs
    tree = near_pairs.tree
    cells_of = near_pairs.leaf_cells
    key_seen = np.zeros(0, np.int64)
    pa_all, pb_all = [], []
    nc = mesh.num_cells
    for (a, b) in near_pairs.nl_pairs:
        ca = cells_of[a]
        cb = cells_of[b]
        if not len(ca) or not len(cb):
            continue
        A, B = np.meshgrid(ca, cb, indexing="ij")
        lo = np.minimum(A, B).ravel()
        hi = np.maximum(A, B).ravel()
        keep = lo != hi
        pa_all.append(lo[keep])
        pb_all.append(hi[keep])
    if pa_all:
        keys = np.concatenate(pa_all).astype(np.int64) * nc + np.concatenate(pb_all)
        keys = np.unique(keys)
        pa = keys // nc
        pb = keys % nc
        # drop touching pairs (handled above)
        cells = mesh.cells
        share = np.zeros(len(pa), bool)
        vs_a = np.sort(cells[pa], axis=1)
        vs_b = np.sort(cells[pb], axis=1)
        for i in range(d + 1):
            for j in range(d + 1):
                share |= vs_a[:, i] == vs_b[:, j]
        pa, pb = pa[~share], pb[~share]
        # keep only pairs with at least one near (i, j) combination
        gd = dofmap.cell_dofs
        li = near_pairs.leaf_idx_of_dof
        any_near = np.zeros(len(pa), bool)
        for a in range(d + 1):
            ia = gd[pa, a]
            oka = ia >= 0
            for b_ in range(d + 1):
                jb = gd[pb, b_]
                ok = oka & (jb >= 0)
                if ok.any():
                    sub = any_near[ok]
                    sub |= near_pairs.mask[li[ia[ok]], li[jb[ok]]]
                    any_near[ok] = sub
        pa, pb = pa[any_near], pb[any_near]
        _cross_triplets(mesh, dofmap, kernel, params, pa, pb, acc,
                        mask_fn=near_pairs.near_mask)

    # boundary flux potential and singular boundary pairs
    touch_T = np.zeros(X.shape[:2])
    if V_nodes is None:
        E = mesh.boundary_edges
        if d == 1:
            V_nodes = edge_flux_potential(X, mesh.vertices[E[:, 0]], None,
                                          mesh.boundary_normals, s, d=1)
        else:
            V_nodes = edge_flux_potential(X, mesh.vertices[E[:, 0]],
                                          mesh.vertices[E[:, 1]],
                                          mesh.boundary_normals, s, d=2)
    if kernel.variant is Variant.INTEGRAL and len(mesh.boundary_edges):
        _touching_boundary_triplets(mesh, dofmap, kernel, params, acc_b, touch_T, X)
        W_in = touch_T - V_nodes   # inward-normal flux of the non-touching edges
        ib, jb, vb = weighted_mass_triplets(mesh, dofmap, X, W, lam, W_in)
        _scatter(acc_b, ib, jb, vb)
    elif kernel.variant is Variant.REGIONAL and len(mesh.boundary_edges):
        # tail potential still needs the touching-edge correction bookkeeping
        _touching_boundary_triplets(mesh, dofmap, kernel, params,
                                    ([], [], []), touch_T, X)

    # kernel tail: Psi = (V - ring flux)/(2s), with the same per-edge rule so the
    # touching-edge parts cancel exactly inside the difference
    psi = tail_potential(mesh, s, X, V_nodes)
    it, jt, vt = weighted_mass_triplets(mesh, dofmap, X, W, lam, psi)
    _scatter(acc, it, jt, 2.0 * vt)

    C = kernel.C_ds
    I = [np.concatenate(acc[0])] if acc[0] else []
    J = [np.concatenate(acc[1])] if acc[1] else []
    Vv = [0.5 * C * np.concatenate(acc[2])] if acc[2] else []
    if acc_b[0]:
        I.append(np.concatenate(acc_b[0]))
        J.append(np.concatenate(acc_b[1]))
        Vv.append(C / (2 * s) * np.concatenate(acc_b[2]))
    if not I:
        return coo_matrix((n, n)).tocsr()
    A = coo_matrix((np.concatenate(Vv), (np.concatenate(I), np.concatenate(J))),
                   shape=(n, n)).tocsr()
    return A


def _all_disjoint_pairs(nc, mesh):
    A, B = np.triu_indices(nc, k=1)
    cells = mesh.cells
    share = np.zeros(len(A), bool)
    vs_a = np.sort(cells[A], axis=1)
    vs_b = np.sort(cells[B], axis=1)
    for i in range(cells.shape[1]):
        for j in range(cells.shape[1]):
            share |= vs_a[:, i] == vs_b[:, j]
    return A[~share], B[~share]


def direct_tail_potential(mesh, kernel, params, X, n_dofs, boost=4):
    """Independent reference for the kernel tail: Psi_K(x) by direct Gauss
    integration over every cell not touching K, at orders raised by ``boost``."""
    from dataclasses import replace
    s = kernel.s
    d = mesh.d
    nc = mesh.num_cells
    Pall = mesh.cell_coords()
    J = _jacobians(Pall)
    diam = mesh.cell_diameters()
    out = np.zeros(X.shape[:2])
    ex = -(d / 2.0 + s)
    hi_params = replace(params, C_offset=params.C_offset - boost)
    # neighbor sets via vertex patches
    offs, pdata = mesh.patch_arrays()
    neigh = [np.unique(np.concatenate([pdata[offs[v]:offs[v + 1]]
                                       for v in mesh.cells[c]]))
             for c in range(nc)]
    # enumerate (target, source) pairs = all minus touching, grouped by order
    pa = np.repeat(np.arange(nc), nc)
    pb = np.tile(np.arange(nc), nc)
    keep = np.ones(nc * nc, bool)
    for c in range(nc):
        keep[c * nc + neigh[c]] = False
    pa, pb = pa[keep], pb[keep]
    dist = _dist_estimate_coords(Pall[pa], Pall[pb])
    ks = select_order(PairTopology.DISJOINT, diam[pa], diam[pb],
                      np.maximum(dist, 1e-300), n_dofs, s, hi_params, d=d)
    q = X.shape[1]
    for k in np.unique(ks):
        sel = np.nonzero(ks == k)[0]
        pts, w = simplex_rule(d, int(k))
        step = max(256, _chunk_for(q * int(k) ** d))
        for lo in range(0, len(sel), step):
            sl = sel[lo:lo + step]
            Y = _map_points(Pall[pb[sl]], pts)         # (B, qy, d)
            diff = X[pa[sl]][:, :, None, :] - Y[:, None, :, :]
            r2 = np.sum(diff ** 2, axis=-1)            # (B, q, qy)
            vals = np.einsum("bxq,q,b->bx", r2 ** ex, w, J[pb[sl]], optimize=True)
            np.add.at(out, pa[sl], vals)
    return out


def _disjoint_full_triplets(mesh, dofmap, kernel, params, pa, pb, acc, weight=2.0,
                            Pb_coords=None, dofs_b=None):
    """Raw full difference-form matrices on disjoint pairs (cross and diagonal
    expansion terms together); ``weight`` 2 for unordered pairs, 1 for ordered."""
    s = kernel.s
    d = mesh.d
    n = dofmap.n
    diam = mesh.cell_diameters()
    Pa_all = mesh.cell_coords()
    Pb_all = Pa_all if Pb_coords is None else Pb_coords
    hb = diam if Pb_coords is None else _diam_of(Pb_coords)
    dist = _dist_estimate_coords(Pa_all[pa], Pb_all[pb])
    ks = select_order(PairTopology.DISJOINT, diam[pa], hb[pb], np.maximum(dist, 1e-300),
                      n, s, params, d=d)
    gd_a = dofmap.cell_dofs
    gd_b = gd_a if dofs_b is None else dofs_b
    for k in np.unique(ks):
        sel = np.nonzero(ks == k)[0]
        step = max(64, _chunk_for(int(k) ** (2 * d)))
        for lo in range(0, len(sel), step):
            sl = sel[lo:lo + step]
            loc = pair_matrices(PairTopology.DISJOINT, Pa_all[pa[sl]], Pb_all[pb[sl]],
                                s, int(k))
            gd = np.concatenate([gd_a[pa[sl]], gd_b[pb[sl]]], axis=1)
            nl = gd.shape[1]
            ii = np.repeat(gd[:, :, None], nl, axis=2)
            jj = np.repeat(gd[:, None, :], nl, axis=1)
            mask = (ii >= 0) & (jj >= 0)
            _scatter(acc, ii[mask], jj[mask], weight * loc[mask])


def assemble_dense(mesh: Mesh, dofmap: DofMap, kernel: FractionalKernel,
                   params: OrderParams | None = None, n_limit=DENSE_LIMIT):
    """Dense stiffness matrix: reference path enumerating every cell pair."""
    if dofmap.n > n_limit:
        raise AssemblyError("dense assembly refused beyond %d dofs" % n_limit)
    params = params or OrderParams()
    if kernel.variant is Variant.SYMMETRIZED:
        return _assemble_dense_symmetrized(mesh, dofmap, kernel, params)
    d = mesh.d
    n = dofmap.n
    s = kernel.s
    acc = ([], [], [])
    acc_b = ([], [], [])
    X, W, lam = cell_quadrature(mesh, XQ_ORDER[d])

    _touching_double_triplets(mesh, dofmap, kernel, params, acc)
    pa, pb = _all_disjoint_pairs(mesh.num_cells, mesh)
    if len(pa):
        _cross_triplets(mesh, dofmap, kernel, params, pa, pb, acc)
    psi = direct_tail_potential(mesh, kernel, params, X, n)
    it, jt, vt = weighted_mass_triplets(mesh, dofmap, X, W, lam, psi)
    _scatter(acc, it, jt, 2.0 * vt)

    touch_T = np.zeros(X.shape[:2])
    if kernel.variant is Variant.INTEGRAL and len(mesh.boundary_edges):
        _touching_boundary_triplets(mesh, dofmap, kernel, params, acc_b, touch_T, X)
        E = mesh.boundary_edges
        if d == 1:
            Vn = edge_flux_potential(X, mesh.vertices[E[:, 0]], None,
                                     mesh.boundary_normals, s, d=1)
        else:
            Vn = edge_flux_potential(X, mesh.vertices[E[:, 0]], mesh.vertices[E[:, 1]],
                                     mesh.boundary_normals, s, d=2)
        W_in = touch_T - Vn
        ib, jb, vb = weighted_mass_triplets(mesh, dofmap, X, W, lam, W_in)
        _scatter(acc_b, ib, jb, vb)

    C = kernel.C_ds
    A = np.zeros((n, n))
    if acc[0]:
        I = np.concatenate(acc[0]); Jj = np.concatenate(acc[1]); Vv = np.concatenate(acc[2])
        np.add.at(A, (I, Jj), 0.5 * C * Vv)
    if acc_b[0]:
        I = np.concatenate(acc_b[0]); Jj = np.concatenate(acc_b[1]); Vv = np.concatenate(acc_b[2])
        np.add.at(A, (I, Jj), C / (2 * s) * Vv)
    return A


# ------------------------------------------------------- symmetrized (dense)

def _match_rotated_vertices(mesh, B):
    """Virtual vertex ids of the rotated mesh: matched original id or fresh id."""
    from scipy.spatial import cKDTree
    V = mesh.vertices
    Vr = V @ B.T
    tol = 1e-8 * mesh.cell_diameters().max()
    dist, idx = cKDTree(V).query(Vr)
    ids = np.where(dist < tol, idx, mesh.num_vertices + np.arange(len(V)))
    return ids, Vr


def _assemble_dense_symmetrized(mesh, dofmap, kernel, params):
    """Dense assembly on a representative sector with the effective kernel
    k_eff(x,y) = sum_i |x - B^i y|^{-d-2s}; includes the sym_order prefactor."""
    d = mesh.d
    n = dofmap.n
    s = kernel.s
    nc = mesh.num_cells
    acc = ([], [], [])
    acc_b = ([], [], [])
    X, W, lam = cell_quadrature(mesh, XQ_ORDER[d])
    cells = mesh.cells
    Vco = mesh.vertices
    gd = dofmap.cell_dofs
    diam = mesh.cell_diameters()

    # image 0: plain sector-vs-sector contributions
    _touching_double_triplets(mesh, dofmap, kernel, params, acc)
    pa, pb = _all_disjoint_pairs(nc, mesh)
    if len(pa):
        _disjoint_full_triplets(mesh, dofmap, kernel, params, pa, pb, acc)

    images = kernel.images()
    for Bi in images[1:]:
        ids, Vr = _match_rotated_vertices(mesh, Bi)
        img_cells = ids[cells]
        Pimg = Vr[cells]
        # shared-vertex counts of all ordered (K, K~img) pairs
        share = np.zeros((nc, nc), np.int8)
        for a in range(d + 1):
            for b in range(d + 1):
                share += (cells[:, a][:, None] == img_cells[:, b][None, :]).astype(np.int8)
        pa2, pb2 = np.nonzero(share == 0)
        _disjoint_full_triplets(mesh, dofmap, kernel, params, pa2, pb2, acc,
                                weight=1.0, Pb_coords=Pimg, dofs_b=gd)
        # touching image pairs, case by case (few of them)
        ta, tb = np.nonzero(share > 0)
        P = mesh.cell_coords()
        for K, K2 in zip(ta, tb):
            ka = [int(v) for v in cells[K]]
            kb = [int(v) for v in img_cells[K2]]
            common = sorted(set(ka) & set(kb))
            if d == 2 and len(common) == 2:
                topo = PairTopology.COMMON_EDGE
                restA = [v for v in ka if v not in common]
                restB = [v for v in kb if v not in common]
                ordA = common + restA
                ordB = common + restB
            else:
                topo = PairTopology.COMMON_VERTEX
                c0 = common[0]
                ordA = [c0] + [v for v in ka if v != c0]
                ordB = [c0] + [v for v in kb if v != c0]
            posA = [ka.index(v) for v in ordA]
            posB = [kb.index(v) for v in ordB]
            PK = P[K][posA]
            PK2 = Pimg[K2][posB]
            k = int(select_order(topo, diam[K], diam[K2], 0.0, n, s, params, d=d))
            loc = pair_matrices(topo, PK[None], PK2[None], s, k)[0]
            if topo is PairTopology.COMMON_EDGE:
                gl = [gd[K][posA[0]], gd[K][posA[1]], gd[K][posA[2]], gd[K2][posB[2]]]
            else:
                gl = [gd[K][posA[0]], gd[K][posA[1]], gd[K][posA[2]],
                      gd[K2][posB[1]], gd[K2][posB[2]]]
            gl = np.asarray(gl)
            ii = np.repeat(gl[:, None], len(gl), axis=1)
            jj = ii.T
            mask = (ii >= 0) & (jj >= 0)
            _scatter(acc, ii[mask], jj[mask], loc[mask])

    # boundary: true domain boundary only (the arc for sector meshes), with images
    E = mesh.boundary_edges
    if len(E):
        if mesh.snap_radius is not None:
            cenr = mesh.snap_center if mesh.snap_center is not None else np.zeros(d)
            p0r = np.linalg.norm(Vco[E[:, 0]] - cenr, axis=-1)
            p1r = np.linalg.norm(Vco[E[:, 1]] - cenr, axis=-1)
            on_arc = (np.abs(p0r - mesh.snap_radius) < 1e-8) & \
                     (np.abs(p1r - mesh.snap_radius) < 1e-8)
            Earc = E[on_arc]
            Narc = mesh.boundary_normals[on_arc]
        else:
            Earc = E
            Narc = mesh.boundary_normals
        touch_T = np.zeros(X.shape[:2])
        sub = _SubsetBoundary(mesh, Earc, Narc)
        _touching_boundary_triplets(sub, dofmap, kernel, params, acc_b, touch_T, X)
        # image edges touching a cell at a matched corner: singular rule + GL
        # cancellation, like the i=0 touching edges
        offs, pdata = mesh.patch_arrays()
        for Bi in images[1:]:
            ids, Vr = _match_rotated_vertices(mesh, Bi)
            for eix in range(len(Earc)):
                eids = ids[Earc[eix]]
                p0i = Vr[Earc[eix, 0]]
                p1i = Vr[Earc[eix, 1]]
                ni_in = -(Narc[eix] @ Bi.T)
                for w in eids[eids < mesh.num_vertices]:
                    for c in pdata[offs[w]:offs[w + 1]]:
                        shared = set(int(v) for v in cells[c]) & set(int(v) for v in eids)
                        if not shared:
                            continue
                        c0 = shared.pop()
                        rest = [v for v in cells[c] if v != c0]
                        order = [c0] + rest
                        PK = Vco[order][None]
                        # edge param from the shared vertex outward
                        if ids[Earc[eix, 0]] == c0:
                            PE = np.stack([p0i, p1i])[None]
                        else:
                            PE = np.stack([p1i, p0i])[None]
                        k = int(select_order(PairTopology.TOUCHING_EDGE, diam[c],
                                             diam[c], 0.0, n, s, params,
                                             boundary=True, d=d))
                        loc = boundary_pair_matrices(PairTopology.TOUCHING_EDGE,
                                                     PK, PE, ni_in[None], s, k, 0)[0]
                        gl = dofmap.vertex_to_dof[np.asarray(order)]
                        ii = np.repeat(gl[:, None], len(gl), axis=1)
                        jj = ii.T
                        mask = (ii >= 0) & (jj >= 0)
                        _scatter(acc_b, ii[mask], jj[mask], loc[mask])
                        touch_T[c] += edge_flux_potential(
                            X[c], p0i[None], p1i[None], (Narc[eix] @ Bi.T)[None],
                            s, d=d)
        Vn = np.zeros(X.shape[:2])
        for Bi in images:
            p0 = Vco[Earc[:, 0]] @ Bi.T
            p1 = Vco[Earc[:, 1]] @ Bi.T
            nr = Narc @ Bi.T
            Vn += edge_flux_potential(X, p0, p1, nr, s, d=d)
        W_in = touch_T - Vn
        ib, jb, vb = weighted_mass_triplets(mesh, dofmap, X, W, lam, W_in)
        _scatter(acc_b, ib, jb, vb)

    C = kernel.C_ds
    Kf = kernel.sym_order
    A = np.zeros((n, n))
    if acc[0]:
        I = np.concatenate(acc[0]); Jj = np.concatenate(acc[1]); Vv = np.concatenate(acc[2])
        np.add.at(A, (I, Jj), Kf * 0.5 * C * Vv)
    if acc_b[0]:
        I = np.concatenate(acc_b[0]); Jj = np.concatenate(acc_b[1]); Vv = np.concatenate(acc_b[2])
        np.add.at(A, (I, Jj), Kf * C / (2 * s) * Vv)
    return A


class _SubsetBoundary:
    """Mesh view with a restricted boundary edge set (for sector assembly)."""

    def __init__(self, mesh, edges, normals):
        self.__dict__.update(mesh.__dict__)
        self._base = mesh
        self.boundary_edges = edges
        self.boundary_normals = normals

    def patch_arrays(self):
        return self._base.patch_arrays()

    def cell_diameters(self):
        return self._base.cell_diameters()
