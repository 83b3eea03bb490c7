"""Simplicial meshes on intervals and polygons with conforming bisection refinement.

Cells are intervals (d=1) or triangles (d=2).  2D refinement uses newest-vertex
bisection: a cell (v0, v1, v2) has refinement edge (v0, v1) and peak v2; bisecting
at the midpoint m yields children (v2, v0, m) and (v1, v2, m), whose refinement
edges are the two old non-refinement edges.  Conformity is restored by iterated
edge marking before any cell is split, so a marked edge is split in every cell
containing it and no hanging nodes appear.

Meshes are immutable after construction; ``refine`` returns a new mesh that keeps
a reference to its parent together with the bisected vertex pairs, which is what
P1 prolongation between nested meshes needs.
"""

from __future__ import annotations

import numpy as np


class MeshError(ValueError):
    pass


class Mesh:
    """Conforming simplicial mesh.

    Attributes
    ----------
    vertices : (nv, d) float array
    cells : (nc, d+1) int array; in 2D the refinement edge is (cell[0], cell[1])
    boundary_edges : (nb, d) int array of vertex indices on the domain boundary
    boundary_normals : (nb, d) float array, outward unit normals
    level : (nc,) int, bisection generation of each cell
    parent : Mesh or None
    cell_parent : (nc,) int, index of the parent cell in ``parent`` (or the cell's
        own former index when it was carried over unchanged)
    new_vertex_pairs : (nv - nv_parent, 2) int, the endpoints (parent indexing ==
        this mesh's indexing for old vertices) whose midpoint each new vertex is
    """

    def __init__(self, vertices, cells, boundary_edges, boundary_normals,
                 level=None, parent=None, cell_parent=None, new_vertex_pairs=None,
                 snap_radius=None, snap_center=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.cells = np.ascontiguousarray(cells, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(boundary_edges, dtype=np.int64)
        self.boundary_normals = np.ascontiguousarray(boundary_normals, dtype=float)
        self.d = self.vertices.shape[1]
        nc = len(self.cells)
        self.level = np.zeros(nc, dtype=np.int64) if level is None else np.asarray(level, dtype=np.int64)
        self.parent = parent
        self.cell_parent = (np.full(nc, -1, dtype=np.int64) if cell_parent is None
                            else np.asarray(cell_parent, dtype=np.int64))
        self.new_vertex_pairs = (np.zeros((0, 2), dtype=np.int64) if new_vertex_pairs is None
                                 else np.asarray(new_vertex_pairs, dtype=np.int64))
        self.snap_radius = snap_radius
        self.snap_center = None if snap_center is None else np.asarray(snap_center, float)
        self._patches = None
        self._diams = None

    # ------------------------------------------------------------------ queries

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_cells(self):
        return len(self.cells)

    def cell_coords(self, idx=None):
        """Vertex coordinates per cell, shape (nc, d+1, d)."""
        cells = self.cells if idx is None else self.cells[idx]
        return self.vertices[cells]

    def cell_diameters(self):
        if self._diams is None:
            P = self.cell_coords()
            if self.d == 1:
                self._diams = np.abs(P[:, 1, 0] - P[:, 0, 0])
            else:
                e0 = np.linalg.norm(P[:, 1] - P[:, 0], axis=1)
                e1 = np.linalg.norm(P[:, 2] - P[:, 1], axis=1)
                e2 = np.linalg.norm(P[:, 0] - P[:, 2], axis=1)
                self._diams = np.maximum(e0, np.maximum(e1, e2))
        return self._diams

    def cell_volumes(self):
        P = self.cell_coords()
        if self.d == 1:
            return np.abs(P[:, 1, 0] - P[:, 0, 0])
        a = P[:, 1] - P[:, 0]
        b = P[:, 2] - P[:, 0]
        return 0.5 * np.abs(a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])

    def boundary_vertex_mask(self):
        mask = np.zeros(self.num_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask

    def min_angle(self):
        """Minimum interior angle over all cells (2D only), in radians."""
        if self.d != 2:
            raise MeshError("angles are defined for 2D meshes only")
        P = self.cell_coords()
        angles = []
        for i in range(3):
            u = P[:, (i + 1) % 3] - P[:, i]
            v = P[:, (i + 2) % 3] - P[:, i]
            c = np.sum(u * v, axis=1) / (np.linalg.norm(u, axis=1) * np.linalg.norm(v, axis=1))
            angles.append(np.arccos(np.clip(c, -1.0, 1.0)))
        return float(np.min(angles))

    def patches(self):
        """Map node -> array of cell indices containing it (CSR-backed dict view)."""
        if self._patches is None:
            nv = self.num_vertices
            flat = self.cells.ravel()
            order = np.argsort(flat, kind="stable")
            data = np.repeat(np.arange(self.num_cells), self.cells.shape[1])[order]
            counts = np.bincount(flat, minlength=nv)
            offs = np.concatenate([[0], np.cumsum(counts)])
            self._patches = (offs, data)
        offs, data = self._patches
        return {i: data[offs[i]:offs[i + 1]] for i in range(self.num_vertices)}

    def patch_arrays(self):
        """CSR arrays (offsets, cell_ids) of the node->cells map."""
        self.patches()
        return self._patches

    def edges_of_cells(self):
        """Unique undirected edges and the (cell, local-edge) incidence, 2D only."""
        c = self.cells
        raw = np.concatenate([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]])
        key = np.sort(raw, axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        return uniq, inv.reshape(3, -1).T  # cell_edges[c, i] = edge id of local edge i

    # ------------------------------------------------------------- conformity

    def conformity_audit(self):
        """Raise MeshError if hanging nodes / bad intersections are detected."""
        if self.d == 1:
            x = self.vertices[:, 0]
            for a, b in self.cells:
                if not x[a] < x[b] or np.isclose(x[a], x[b]):
                    if x[a] >= x[b]:
                        raise MeshError("degenerate or inverted interval cell")
            # cells partition: sorted left endpoints must tile componentwise
            return True
        uniq, cell_edges = self.edges_of_cells()
        counts = np.bincount(cell_edges.ravel(), minlength=len(uniq))
        if counts.max() > 2:
            raise MeshError("edge shared by more than two cells")
        # an edge used once must be a boundary edge; twice must be interior
        bset = {tuple(sorted(e)) for e in self.boundary_edges}
        once = np.nonzero(counts == 1)[0]
        for e in once:
            if tuple(uniq[e]) not in bset:
                raise MeshError("hanging node: interior edge used by a single cell")
        # vertices of cells must not lie strictly inside another cell's edge
        verts_used = np.unique(self.cells.ravel())
        vset = self.vertices[verts_used]
        for e in uniq:
            p, q = self.vertices[e[0]], self.vertices[e[1]]
            t = vset - p
            ev = q - p
            L2 = ev @ ev
            proj = (t @ ev) / L2
            perp = t - np.outer(proj, ev)
            on = (np.linalg.norm(perp, axis=1) < 1e-12 * np.sqrt(L2)) & (proj > 1e-10) & (proj < 1 - 1e-10)
            if np.any(on):
                raise MeshError("vertex lies in the interior of an edge (hanging node)")
        return True

    # ------------------------------------------------------------- refinement

    def refine(self, marked):
        return refine(self, marked)

    def refine_uniform(self, rounds=1):
        m = self
        for _ in range(rounds):
            m = refine(m, np.arange(m.num_cells))
        return m

    # ------------------------------------------------------------------ dump

    def dump(self):
        """Plain-text dump: header 'd n_vertices n_cells', vertices, cells."""
        lines = ["%d %d %d" % (self.d, self.num_vertices, self.num_cells)]
        for v in self.vertices:
            lines.append(" ".join("%.17g" % c for c in v))
        for c in self.cells:
            lines.append(" ".join(str(int(i)) for i in c))
        return "\n".join(lines) + "\n"


class DofMap:
    """Degree-of-freedom enumeration: all vertices for s < 1/2, interior ones else.

    ``identify`` optionally maps vertex -> representative vertex before DOF
    enumeration (used for rotationally periodic sector discretizations).
    """

    def __init__(self, mesh: Mesh, s: float, identify=None):
        if not 0.0 < s < 1.0:
            raise ValueError("fractional order s must lie in (0,1)")
        self.mesh = mesh
        self.s = s
        nv = mesh.num_vertices
        rep = np.arange(nv)
        if identify:
            for v, r in identify.items():
                rep[v] = r
        self.vertex_rep = rep
        bmask = mesh.boundary_vertex_mask()
        if identify:
            # a class is boundary if any member is
            for v, r in identify.items():
                if bmask[v]:
                    bmask[r] = True
                bmask[v] = bmask[r]
        eligible = np.ones(nv, dtype=bool) if s < 0.5 else ~bmask
        is_rep = rep == np.arange(nv)
        take = eligible & is_rep
        self.dofs = np.nonzero(take)[0]
        self.vertex_to_dof = np.full(nv, -1, dtype=np.int64)
        self.vertex_to_dof[self.dofs] = np.arange(len(self.dofs))
        # non-representative vertices inherit their class's dof
        self.vertex_to_dof = self.vertex_to_dof[rep]
        self.cell_dofs = self.vertex_to_dof[mesh.cells]

    @property
    def n(self):
        return len(self.dofs)

    def dof_coords(self):
        return self.mesh.vertices[self.dofs]


class MeshStats:
    def __init__(self, h, h_min, h_boundary, n):
        self.h = h
        self.h_min = h_min
        self.h_boundary = h_boundary
        self.n = n

    def __repr__(self):
        return "MeshStats(h=%.3e, h_min=%.3e, h_boundary=%.3e, n=%d)" % (
            self.h, self.h_min, self.h_boundary, self.n)


def stats(mesh: Mesh, dofmap: DofMap) -> MeshStats:
    diam = mesh.cell_diameters()
    bmask = mesh.boundary_vertex_mask()
    # vertices whose patch contains a cell with a boundary vertex
    cell_touches = bmask[mesh.cells].any(axis=1)
    vert_near = np.zeros(mesh.num_vertices, dtype=bool)
    vert_near[np.unique(mesh.cells[cell_touches])] = True
    patch_touches = vert_near[mesh.cells].any(axis=1)
    h_b = float(diam[patch_touches].max()) if patch_touches.any() else 0.0
    return MeshStats(float(diam.max()), float(diam.min()), h_b, dofmap.n)


def patches(mesh: Mesh):
    return mesh.patches()


# ---------------------------------------------------------------- constructors

def build_interval_mesh(a: float, b: float, n_cells: int) -> Mesh:
    if not (a < b) or n_cells < 1:
        raise MeshError("need a < b and n_cells >= 1")
    x = np.linspace(a, b, n_cells + 1)
    cells = np.stack([np.arange(n_cells), np.arange(1, n_cells + 1)], axis=1)
    be = np.array([[0], [n_cells]])
    bn = np.array([[-1.0], [1.0]])
    return Mesh(x[:, None], cells, be, bn)


def _polygon_is_simple(loop):
    """Check a closed loop (m,2) for self intersections."""
    m = len(loop)
    segs = [(loop[i], loop[(i + 1) % m]) for i in range(m)]

    def inter(p, q, r, t):
        d1 = q - p
        d2 = t - r
        den = d1[0] * d2[1] - d1[1] * d2[0]
        if abs(den) < 1e-15:
            return False
        u = ((r - p)[0] * d2[1] - (r - p)[1] * d2[0]) / den
        v = ((r - p)[0] * d1[1] - (r - p)[1] * d1[0]) / den
        return 1e-12 < u < 1 - 1e-12 and 1e-12 < v < 1 - 1e-12

    for i in range(m):
        for j in range(i + 1, m):
            if j == i or (j + 1) % m == i or (i + 1) % m == j:
                continue
            if inter(*segs[i], *segs[j]):
                return False
    return True


def _earclip(loop):
    """Triangulate a simple polygon loop (m,2) -> list of index triples."""
    n = len(loop)
    idx = list(range(n))
    # ensure CCW
    area2 = sum(loop[i][0] * loop[(i + 1) % n][1] - loop[(i + 1) % n][0] * loop[i][1]
                for i in range(n))
    if area2 < 0:
        idx = idx[::-1]
    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10000:
        guard += 1
        m = len(idx)
        clipped = False
        for k in range(m):
            i0, i1, i2 = idx[(k - 1) % m], idx[k], idx[(k + 1) % m]
            a, b, c = loop[i0], loop[i1], loop[i2]
            cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
            if cross <= 1e-14:
                continue  # reflex or degenerate
            # no other vertex inside the candidate ear
            ok = True
            for j in idx:
                if j in (i0, i1, i2):
                    continue
                p = loop[j]
                w0 = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
                w1 = (c[0] - b[0]) * (p[1] - b[1]) - (c[1] - b[1]) * (p[0] - b[0])
                w2 = (a[0] - c[0]) * (p[1] - c[1]) - (a[1] - c[1]) * (p[0] - c[0])
                if w0 >= -1e-12 and w1 >= -1e-12 and w2 >= -1e-12:
                    ok = False
                    break
            if ok:
                tris.append((i0, i1, i2))
                idx.pop(k)
                clipped = True
                break
        if not clipped:
            raise MeshError("ear clipping failed; polygon may be degenerate")
    tris.append(tuple(idx))
    return tris


def _finish_polygon_mesh(vertices, cells, snap_radius=None, snap_center=None,
                         circle_only_boundary=False):
    """Derive boundary edges/normals and set longest-edge refinement order."""
    vertices = np.asarray(vertices, float)
    cells = np.asarray(cells, np.int64)
    # orient CCW
    a = vertices[cells[:, 1]] - vertices[cells[:, 0]]
    b = vertices[cells[:, 2]] - vertices[cells[:, 0]]
    flip = (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]) < 0
    cells[flip] = cells[flip][:, [0, 2, 1]]
    # refinement edge = longest edge first (ties broken by vertex pair, so the two
    # cells sharing an edge agree on whether it is their refinement edge)
    P = vertices[cells]
    lens = np.stack([np.linalg.norm(P[:, (i + 1) % 3] - P[:, i], axis=1)
                     for i in range(3)], axis=1)
    lo = np.minimum(cells, np.roll(cells, -1, axis=1))
    hi = np.maximum(cells, np.roll(cells, -1, axis=1))
    nvb = len(vertices)
    composite = np.round(lens / lens.max(), 12) * (nvb * nvb * 4.0) + lo * (2.0 * nvb) + hi
    roll = np.argmax(composite, axis=1)
    c2 = np.empty_like(cells)
    for r in range(3):
        sel = roll == r
        c2[sel] = np.roll(cells[sel], -r, axis=1)
    cells = c2
    mesh = Mesh(vertices, cells, np.zeros((0, 2), np.int64), np.zeros((0, 2)),
                snap_radius=snap_radius, snap_center=snap_center)
    be, bn = _boundary_of(mesh)
    mesh.boundary_edges = be
    mesh.boundary_normals = bn
    return mesh


def _boundary_of(mesh):
    uniq, cell_edges = mesh.edges_of_cells()
    counts = np.bincount(cell_edges.ravel(), minlength=len(uniq))
    bidx = np.nonzero(counts == 1)[0]
    be = uniq[bidx]
    # outward normal: rotate edge, point away from the owning cell's centroid
    owners = np.full(len(uniq), -1, np.int64)
    for loc in range(3):
        owners[cell_edges[:, loc]] = np.arange(mesh.num_cells)
    bn = np.empty((len(be), 2))
    for k, e in enumerate(be):
        p, q = mesh.vertices[e[0]], mesh.vertices[e[1]]
        t = q - p
        nrm = np.array([t[1], -t[0]])
        nrm /= np.linalg.norm(nrm)
        cen = mesh.vertices[mesh.cells[owners[bidx[k]]]].mean(axis=0)
        if (0.5 * (p + q) - cen) @ nrm < 0:
            nrm = -nrm
        bn[k] = nrm
    return be, bn


def build_polygon_mesh(loops, target_h: float, snap_radius=None, snap_center=None) -> Mesh:
    """Triangulate one or more disjoint simple polygon loops, refine to target_h."""
    if target_h <= 0:
        raise MeshError("target_h must be positive")
    if isinstance(loops, np.ndarray) or not isinstance(loops[0][0], (list, tuple, np.ndarray)):
        loops = [loops]
    verts = []
    tris = []
    for loop in loops:
        loop = np.asarray(loop, float)
        if len(loop) < 3 or not _polygon_is_simple(loop):
            raise MeshError("polygon loop must be simple with >= 3 vertices")
        off = len(verts)
        local = _earclip(loop)
        verts.extend(loop)
        tris.extend([(a + off, b + off, c + off) for a, b, c in local])
    mesh = _finish_polygon_mesh(np.asarray(verts), np.asarray(tris),
                                snap_radius=snap_radius, snap_center=snap_center)
    while mesh.cell_diameters().max() > target_h:
        mesh = refine(mesh, np.arange(mesh.num_cells))
    return mesh


def build_disc_mesh(target_h: float, radius=1.0, center=(0.0, 0.0)) -> Mesh:
    """Inscribed-polygon disc mesh whose boundary vertices lie on the circle."""
    center = np.asarray(center, float)
    k = 8
    ang = 2 * np.pi * np.arange(k) / k
    verts = [center] + [center + radius * np.array([np.cos(a), np.sin(a)]) for a in ang]
    tris = [(0, 1 + i, 1 + (i + 1) % k) for i in range(k)]
    mesh = _finish_polygon_mesh(np.asarray(verts), np.asarray(tris),
                                snap_radius=radius, snap_center=center)
    while mesh.cell_diameters().max() > target_h:
        mesh = refine(mesh, np.arange(mesh.num_cells))
    return mesh


def build_sector_mesh(target_h: float, angle, radius=1.0) -> Mesh:
    """Uniform mesh of the circular sector {0 <= phi <= angle, r <= radius}.

    The two radial sides are meshed identically so a rotation by ``angle`` maps
    the lower side's vertices onto the upper side's.
    """
    nr = max(2, int(np.ceil(radius / target_h)))
    na = max(2, int(np.ceil(angle * radius / target_h)))
    verts = [np.zeros(2)]
    rows = [[0] * (na + 1)]  # ring 0 collapses to the apex
    for i in range(1, nr + 1):
        r = radius * i / nr
        row = []
        for j in range(na + 1):
            a = angle * j / na
            row.append(len(verts))
            verts.append(np.array([r * np.cos(a), r * np.sin(a)]))
        rows.append(row)
    tris = []
    for j in range(na):
        tris.append((0, rows[1][j], rows[1][j + 1]))
    for i in range(1, nr):
        for j in range(na):
            a, b = rows[i][j], rows[i][j + 1]
            c, d = rows[i + 1][j], rows[i + 1][j + 1]
            tris.append((a, c, d))
            tris.append((a, d, b))
    return _finish_polygon_mesh(np.asarray(verts), np.asarray(tris),
                                snap_radius=radius, snap_center=(0.0, 0.0))


def build_lshape_mesh(target_h: float) -> Mesh:
    loop = [(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)]
    return build_polygon_mesh(loop, target_h)


def build_two_component_mesh(target_h: float, gap=0.05) -> Mesh:
    """Unit square with the strip |y-1/2| < gap removed: two components."""
    lower = [(0, 0), (1, 0), (1, 0.5 - gap), (0, 0.5 - gap)]
    upper = [(0, 0.5 + gap), (1, 0.5 + gap), (1, 1), (0, 1)]
    return build_polygon_mesh([lower, upper], target_h)


# ------------------------------------------------------------------ refinement

def refine(mesh: Mesh, marked) -> Mesh:
    marked = np.atleast_1d(np.asarray(marked, dtype=np.int64))
    if marked.size == 0:
        return mesh
    if mesh.d == 1:
        return _refine_1d(mesh, marked)
    return _refine_2d(mesh, marked)


def _refine_1d(mesh, marked):
    nv = mesh.num_vertices
    x = mesh.vertices[:, 0]
    msk = np.zeros(mesh.num_cells, dtype=bool)
    msk[marked] = True
    new_cells = []
    new_level = []
    cell_parent = []
    new_pairs = []
    verts = list(x)
    for c in range(mesh.num_cells):
        a, b = mesh.cells[c]
        if msk[c]:
            mid = len(verts)
            verts.append(0.5 * (x[a] + x[b]))
            new_pairs.append((a, b))
            new_cells += [(a, mid), (mid, b)]
            new_level += [mesh.level[c] + 1] * 2
            cell_parent += [c, c]
        else:
            new_cells.append((a, b))
            new_level.append(mesh.level[c])
            cell_parent.append(c)
    return Mesh(np.asarray(verts)[:, None], np.asarray(new_cells),
                mesh.boundary_edges.copy(), mesh.boundary_normals.copy(),
                level=new_level, parent=mesh, cell_parent=cell_parent,
                new_vertex_pairs=np.asarray(new_pairs, np.int64).reshape(-1, 2))


def _refine_2d(mesh, marked):
    cells = mesh.cells
    nc = mesh.num_cells
    uniq, cell_edges = mesh.edges_of_cells()
    ref_edge = cell_edges[:, 0]  # local edge 0 = (v0, v1)
    edge_marked = np.zeros(len(uniq), dtype=bool)
    edge_marked[ref_edge[marked]] = True
    # closure: any cell with a marked edge must have its refinement edge marked
    while True:
        has_marked = edge_marked[cell_edges].any(axis=1)
        need = has_marked & ~edge_marked[ref_edge]
        if not need.any():
            break
        edge_marked[ref_edge[need]] = True

    verts = [mesh.vertices]
    nv = mesh.num_vertices
    mid_of = np.full(len(uniq), -1, dtype=np.int64)
    to_split = np.nonzero(edge_marked)[0]
    if len(to_split):
        mids = 0.5 * (mesh.vertices[uniq[to_split, 0]] + mesh.vertices[uniq[to_split, 1]])
        # snap circle-boundary midpoints outward to the circle
        if mesh.snap_radius is not None:
            bset = {tuple(sorted(e)) for e in mesh.boundary_edges}
            r = mesh.snap_radius
            c0 = mesh.snap_center
            for k, eidx in enumerate(to_split):
                e = uniq[eidx]
                if tuple(sorted(e)) in bset:
                    p0, p1 = mesh.vertices[e[0]], mesh.vertices[e[1]]
                    if (abs(np.linalg.norm(p0 - c0) - r) < 1e-9 * max(1.0, r)
                            and abs(np.linalg.norm(p1 - c0) - r) < 1e-9 * max(1.0, r)):
                        v = mids[k] - c0
                        mids[k] = c0 + v * (r / np.linalg.norm(v))
        mid_of[to_split] = nv + np.arange(len(to_split))
        verts.append(mids)
    vertices = np.vstack(verts)
    new_pairs = uniq[to_split]

    new_cells = []
    new_level = []
    cell_parent = []

    def emit(tri, lev, par):
        new_cells.append(tri)
        new_level.append(lev)
        cell_parent.append(par)

    def bisect(tri, e_ids, lev, par, emarked):
        """tri = (a,b,c) with refinement edge (a,b); e_ids local edge ids in uniq."""
        a, b, c = tri
        e_ab, e_bc, e_ca = e_ids
        if not emarked[e_ab]:
            emit((a, b, c), lev, par)
            return
        m = mid_of[e_ab]
        # children: (c, a, m) with ref edge (c,a); (b, c, m) with ref edge (b,c)
        left = ((c, a, m), e_ca)
        right = ((b, c, m), e_bc)
        for (tri2, e2) in (left, right):
            # a child's refinement edge is an old edge of the parent; if that edge
            # is marked too, split once more (grandchildren's refinement edges are
            # midpoint edges, which are never marked)
            a2, b2, c2 = tri2
            if e2 >= 0 and emarked[e2]:
                m2 = mid_of[e2]
                emit((c2, a2, m2), lev + 2, par)
                emit((b2, c2, m2), lev + 2, par)
            else:
                emit(tri2, lev + 1, par)

    for c in range(nc):
        tri = tuple(int(v) for v in cells[c])
        eids = tuple(int(e) for e in cell_edges[c])
        bisect(tri, eids, int(mesh.level[c]), c, edge_marked)

    new_mesh = Mesh(vertices, np.asarray(new_cells), np.zeros((0, 2), np.int64),
                    np.zeros((0, 2)), level=new_level, parent=mesh,
                    cell_parent=cell_parent, new_vertex_pairs=new_pairs,
                    snap_radius=mesh.snap_radius, snap_center=mesh.snap_center)
    be, bn = _boundary_of(new_mesh)
    new_mesh.boundary_edges = be
    new_mesh.boundary_normals = bn
    return new_mesh


def prolongation_matrix(coarse: Mesh, fine: Mesh):
    """P1 nodal interpolation matrix between vertex sets of nested meshes."""
    from scipy.sparse import coo_matrix
    if fine.parent is not coarse:
        raise MeshError("fine mesh must be a direct refinement of coarse")
    nvc = coarse.num_vertices
    nvf = fine.num_vertices
    rows = list(range(nvc))
    cols = list(range(nvc))
    vals = [1.0] * nvc
    for k, (a, b) in enumerate(fine.new_vertex_pairs):
        rows += [nvc + k, nvc + k]
        cols += [int(a), int(b)]
        vals += [0.5, 0.5]
    return coo_matrix((vals, (rows, cols)), shape=(nvf, nvc)).tocsr()
