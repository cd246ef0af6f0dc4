"""Triangle meshes, OBJ I/O and remeshing on a shared connectivity."""

from __future__ import annotations

import io
from collections import defaultdict, deque
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    """Raised for meshes that violate the disk-topology contract."""


@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray
    boundary: np.ndarray = field(default=None)
    boundary_loop: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.boundary is None or self.boundary_loop is None:
            self.boundary_loop = boundary_loop(self.faces)
            self.boundary = np.zeros(len(self.vertices), dtype=bool)
            self.boundary[self.boundary_loop] = True

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def face_areas(self) -> np.ndarray:
        return face_areas(self.vertices, self.faces)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)


def face_areas(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    if v.shape[1] == 2:
        v = np.column_stack([v, np.zeros(len(v))])
    a, b, c = v[faces[:, 0]], v[faces[:, 1]], v[faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def signed_area(a, b, c) -> float:
    """Signed area of a 2D triangle; positive when counter-clockwise."""
    return 0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))


def signed_areas(points, faces) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    a, b, c = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def mesh_edges(faces) -> np.ndarray:
    """Unique undirected edges as sorted (a, b) rows, lexicographically ordered.

    The row index is the edge id used throughout the package.
    """
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e.sort(axis=1)
    return np.unique(e, axis=0)


def _directed_half_edges(faces):
    he = {}
    for fi, (a, b, c) in enumerate(faces):
        for u, v in ((a, b), (b, c), (c, a)):
            if (u, v) in he:
                raise MeshError("non-manifold: inconsistent orientation or repeated half-edge")
            he[(int(u), int(v))] = fi
    return he


def boundary_loop(faces) -> np.ndarray:
    """Ordered boundary loop following face orientation. Requires exactly one loop."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        raise MeshError("empty mesh")
    he = _directed_half_edges(faces)
    nxt = {}
    for (u, v) in he:
        if (v, u) not in he:
            if u in nxt:
                raise MeshError("non-manifold boundary vertex")
            nxt[u] = v
    if not nxt:
        raise MeshError("non-disk topology: mesh has no boundary")
    start = min(nxt)
    loop = [start]
    cur = nxt[start]
    while cur != start:
        loop.append(cur)
        cur = nxt[cur]
        if len(loop) > len(nxt):
            raise MeshError("non-manifold boundary")
    if len(loop) != len(nxt):
        raise MeshError("non-disk topology: more than one boundary loop")
    return np.array(loop, dtype=np.int64)


def _orient_consistently(faces: np.ndarray) -> np.ndarray:
    """BFS re-orientation so every interior edge is traversed once in each direction."""
    faces = faces.copy()
    edge_faces = defaultdict(list)
    for fi, f in enumerate(faces):
        for k in range(3):
            a, b = int(f[k]), int(f[(k + 1) % 3])
            edge_faces[(min(a, b), max(a, b))].append(fi)
    for key, fl in edge_faces.items():
        if len(fl) > 2:
            raise MeshError(f"non-manifold edge {key}")
    seen = np.zeros(len(faces), dtype=bool)
    for root in range(len(faces)):
        if seen[root]:
            continue
        seen[root] = True
        queue = deque([root])
        while queue:
            fi = queue.popleft()
            f = faces[fi]
            for k in range(3):
                a, b = int(f[k]), int(f[(k + 1) % 3])
                for gj in edge_faces[(min(a, b), max(a, b))]:
                    if gj == fi:
                        continue
                    g = list(faces[gj])
                    same_dir = any(g[m] == a and g[(m + 1) % 3] == b for m in range(3))
                    if seen[gj]:
                        if same_dir:
                            raise MeshError("non-orientable surface")
                        continue
                    if same_dir:
                        faces[gj] = faces[gj][::-1]
                    seen[gj] = True
                    queue.append(gj)
    return faces


def validate_disk(vertices, faces, rel_area_tol: float = 1e-12) -> TriMesh:
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    vertices = np.asarray(vertices, dtype=float)
    if np.any(faces < 0) or np.any(faces >= len(vertices)):
        raise MeshError("face index out of range")
    if np.any((faces[:, 0] == faces[:, 1]) | (faces[:, 1] == faces[:, 2]) | (faces[:, 0] == faces[:, 2])):
        raise MeshError("degenerate face with repeated vertex")
    used = np.unique(faces)
    if len(used) != len(vertices):
        raise MeshError("mesh has isolated vertices")
    faces = _orient_consistently(faces)
    n_e = len(mesh_edges(faces))
    if len(vertices) - n_e + len(faces) != 1:
        raise MeshError("non-disk topology (Euler characteristic != 1)")
    loop = boundary_loop(faces)
    # vertex manifoldness: each vertex's faces form one fan
    _check_vertex_fans(faces, len(vertices))
    areas = face_areas(vertices, faces)
    total = areas.sum()
    if total <= 0 or np.any(areas <= rel_area_tol * total):
        raise MeshError("degenerate face (area below tolerance)")
    m = TriMesh(vertices, faces, None, None)
    m.boundary_loop = loop
    return m


def _check_vertex_fans(faces, n):
    adj = defaultdict(list)
    for f in faces:
        for k in range(3):
            v = int(f[k])
            adj[v].append((int(f[(k + 1) % 3]), int(f[(k + 2) % 3])))
    for v, pairs in adj.items():
        nxt = {}
        for a, b in pairs:
            nxt[a] = b
        starts = set(nxt) - set(nxt.values())
        if len(starts) > 1:
            raise MeshError(f"non-manifold vertex {v}")
        cur = next(iter(starts)) if starts else pairs[0][0]
        count = 0
        seen = set()
        while cur in nxt and cur not in seen:
            seen.add(cur)
            cur = nxt[cur]
            count += 1
        if count != len(pairs):
            raise MeshError(f"non-manifold vertex {v}")


def parse_mesh(data) -> TriMesh:
    """Parse OBJ text (str or bytes) into a validated disk-topology TriMesh."""
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    verts, faces = [], []
    for lineno, line in enumerate(io.StringIO(data), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
        except ValueError:
            raise MeshError(f"line {lineno}: malformed record")
        if parts[0] == "v" and len(verts[-1]) != 3:
            raise MeshError(f"line {lineno}: vertex needs three coordinates")
        if parts[0] == "f":
            if len(idx) != 3:
                raise MeshError(f"line {lineno}: non-triangular face")
            faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    if not faces:
        raise MeshError("no faces")
    return validate_disk(np.array(verts), np.array(faces))


def load_obj(path) -> TriMesh:
    with open(path, "rb") as fh:
        return parse_mesh(fh.read())


def format_obj(vertices, faces, uv=None) -> str:
    v = np.asarray(vertices, dtype=float)
    if v.shape[1] == 2:
        v = np.column_stack([v, np.zeros(len(v))])
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in v.tolist()]
    if uv is not None:
        out += [f"vt {a!r} {b!r}" for a, b in np.asarray(uv, dtype=float).tolist()]
        out += [f"f {a+1}/{a+1} {b+1}/{b+1} {c+1}/{c+1}" for a, b, c in faces]
    else:
        out += [f"f {a+1} {b+1} {c+1}" for a, b, c in faces]
    return "\n".join(out) + "\n"


def save_obj(path, vertices, faces, uv=None):
    with open(path, "w") as fh:
        fh.write(format_obj(vertices, faces, uv))


def normalize_unit_area(m: TriMesh) -> TriMesh:
    """Uniformly rescale so the total surface area is 1."""
    area = m.area()
    if not area > 0:
        raise MeshError("zero-area mesh")
    s = 1.0 / np.sqrt(area)
    v = m.vertices * s
    out = TriMesh(v, m.faces.copy(), m.boundary.copy(), m.boundary_loop.copy())
    # rescale once more so rounding does not leave the area off by more than an ulp or two
    out.vertices = out.vertices / np.sqrt(out.area())
    return out


def vertex_areas(vertices, faces) -> np.ndarray:
    """Mixed Voronoi vertex areas (Voronoi region, barycentric fallback for obtuse triangles)."""
    v = np.asarray(vertices, dtype=float)
    out = np.zeros(len(v))
    for f in np.asarray(faces):
        p = v[f]
        e = [p[(k + 2) % 3] - p[(k + 1) % 3] for k in range(3)]  # edge opposite corner k
        area = 0.5 * np.linalg.norm(np.cross(e[0], e[1]) if p.shape[1] == 3 else e[0][0] * e[1][1] - e[0][1] * e[1][0])
        if area <= 0:
            continue
        cos = [np.dot(p[(k + 1) % 3] - p[k], p[(k + 2) % 3] - p[k]) for k in range(3)]
        if min(cos) < 0:
            for k in range(3):
                out[f[k]] += area / 2 if cos[k] < 0 else area / 4
            continue
        cot = [c / (2 * area) for c in cos]
        l2 = [np.dot(x, x) for x in e]
        for k in range(3):
            # corner k gets the two half-edges adjacent to it, weighted by the opposite cotangents
            out[f[k]] += (l2[(k + 1) % 3] * cot[(k + 1) % 3] + l2[(k + 2) % 3] * cot[(k + 2) % 3]) / 8
    return out


# ---------------------------------------------------------------------------
# Shared connectivity with several 2D embeddings
# ---------------------------------------------------------------------------


@dataclass
class CompatibleTriangulation:
    """One triangle connectivity shared by per-target uv embeddings and the flat layout."""

    faces: np.ndarray
    uv: list
    flat: np.ndarray

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uv = [np.asarray(u, dtype=float) for u in self.uv]
        self.flat = np.asarray(self.flat, dtype=float)

    @property
    def n_vertices(self) -> int:
        return len(self.flat)

    def embeddings(self):
        return [*self.uv, self.flat]

    def edges(self) -> np.ndarray:
        return mesh_edges(self.faces)

    def boundary_vertices(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[boundary_loop(self.faces)] = True
        return mask

    def copy(self) -> "CompatibleTriangulation":
        return CompatibleTriangulation(self.faces.copy(), [u.copy() for u in self.uv], self.flat.copy())


@dataclass(frozen=True)
class RemeshOp:
    kind: str  # "split" | "collapse" | "flip"
    edge: tuple

    def __post_init__(self):
        if self.kind not in ("split", "collapse", "flip"):
            raise ValueError(f"unknown remesh op {self.kind!r}")
        a, b = self.edge
        object.__setattr__(self, "edge", (min(int(a), int(b)), max(int(a), int(b))))


def _edge_faces(faces, a, b):
    """Faces containing edge (a, b) with the third (opposite) vertex."""
    out = []
    for fi, f in enumerate(faces):
        fl = list(f)
        if a in fl and b in fl:
            out.append((fi, next(int(x) for x in fl if x != a and x != b)))
    return out


def _all_positive(tri: CompatibleTriangulation, faces) -> bool:
    for emb in tri.embeddings():
        if np.any(signed_areas(emb, faces) <= 0):
            return False
    return True


def apply_remesh_op(tri: CompatibleTriangulation, op: RemeshOp):
    """Apply a remesh op identically to every embedding.

    Returns ``(new_tri, None)`` on success and ``(tri, reason)`` when rejected.
    """
    a, b = op.edge
    faces = tri.faces
    adj = _edge_faces(faces, a, b)
    if not adj:
        return tri, "edge not in triangulation"
    if op.kind == "split":
        return _split(tri, a, b, adj)
    if op.kind == "flip":
        return _flip(tri, a, b, adj)
    return _collapse(tri, a, b, adj)


def _split(tri, a, b, adj):
    n = tri.n_vertices
    boundary_edge = len(adj) == 1
    new_faces = [f for fi, f in enumerate(tri.faces.tolist()) if fi not in {x[0] for x in adj}]
    for fi, c in adj:
        f = tri.faces[fi].tolist()
        # keep orientation: replace b by n in one copy, a by n in the other
        f1 = [n if x == b else x for x in f]
        f2 = [n if x == a else x for x in f]
        new_faces += [f1, f2]
    uv = []
    for u in tri.uv:
        m = 0.5 * (u[a] + u[b])
        if boundary_edge:
            r = np.linalg.norm(m)
            if r > 0:
                m = m / r  # boundary vertices live on the unit circle in every target embedding
        uv.append(np.vstack([u, m]))
    flat = np.vstack([tri.flat, 0.5 * (tri.flat[a] + tri.flat[b])])
    out = CompatibleTriangulation(np.array(new_faces), uv, flat)
    if not _all_positive(out, out.faces):
        return tri, "split would invert a triangle"
    return out, None


def _flip(tri, a, b, adj):
    if len(adj) != 2:
        return tri, "cannot flip a boundary edge"
    (f0, c), (f1, d) = adj
    if c == d or len(_edge_faces(tri.faces, min(c, d), max(c, d))) > 0:
        return tri, "flip would create a duplicate edge"
    fa = tri.faces[f0].tolist()
    # orient new faces from face f0's cyclic order (a, b, c) or (b, a, c)
    i = fa.index(c)
    p, q = fa[(i + 1) % 3], fa[(i + 2) % 3]  # c -> p -> q is the orientation in f0
    new = [[c, p, d], [c, d, q]]
    faces = tri.faces.copy()
    faces[f0] = new[0]
    faces[f1] = new[1]
    out = CompatibleTriangulation(faces, [u.copy() for u in tri.uv], tri.flat.copy())
    if not _all_positive(out, faces[[f0, f1]]):
        return tri, "flip would invert a triangle"
    return out, None


def _collapse(tri, a, b, adj):
    faces = tri.faces
    bmask = tri.boundary_vertices()
    n_interior = int((~bmask).sum())
    boundary_edge = len(adj) == 1
    if bmask[a] and bmask[b] and not boundary_edge:
        return tri, "collapse of an interior edge joining two boundary vertices breaks manifoldness"
    if len(faces) - len(adj) < 2:
        return tri, "collapse would leave fewer than two triangles"
    nbr = defaultdict(set)
    for f in faces:
        for k in range(3):
            nbr[int(f[k])].update(int(x) for x in f if x != f[k])
    common = nbr[a] & nbr[b]
    if common != {c for _, c in adj}:
        return tri, "link condition violated"
    if boundary_edge:
        # keep the boundary loop longer than a triangle
        if int(bmask.sum()) <= 3:
            return tri, "boundary would degenerate"
    # which vertex survives, and where
    if bmask[a] and not bmask[b]:
        keep, drop = a, b
        target = [u[a] for u in tri.uv], tri.flat[a]
    elif bmask[b] and not bmask[a]:
        keep, drop = b, a
        target = [u[b] for u in tri.uv], tri.flat[b]
    else:
        keep, drop = a, b
        mids = []
        for u in tri.uv:
            m = 0.5 * (u[a] + u[b])
            if boundary_edge and np.linalg.norm(m) > 0:
                m = m / np.linalg.norm(m)
            mids.append(m)
        target = mids, 0.5 * (tri.flat[a] + tri.flat[b])
    if n_interior > 0 and n_interior - (0 if bmask[drop] else 1) <= 0:
        return tri, "collapse would remove the last interior vertex"
    drop_faces = {fi for fi, _ in adj}
    new_faces = []
    for fi, f in enumerate(faces.tolist()):
        if fi in drop_faces:
            continue
        new_faces.append([keep if x == drop else x for x in f])
    new_faces = np.array(new_faces, dtype=np.int64)
    uv = []
    for u, t in zip(tri.uv, target[0]):
        u2 = u.copy()
        u2[keep] = t
        uv.append(np.delete(u2, drop, axis=0))
    flat = tri.flat.copy()
    flat[keep] = target[1]
    flat = np.delete(flat, drop, axis=0)
    new_faces[new_faces > drop] -= 1
    out = CompatibleTriangulation(new_faces, uv, flat)
    if not _all_positive(out, out.faces):
        return tri, "collapse would invert a triangle"
    return out, None
