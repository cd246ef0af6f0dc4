"""Skeletal graph of bone/muscle building blocks and per-target morph data."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .mesh import MeshError, mesh_edges, signed_areas

GRAPH_VERSION = 1
TARGET_VERSION = 1


@dataclass
class MuscleSlot:
    present: bool = True
    attachment: dict = field(default_factory=dict)  # opaque slot geometry


@dataclass
class Edge:
    a: int
    b: int
    rest_mm: float
    top: MuscleSlot = field(default_factory=MuscleSlot)
    bottom: MuscleSlot = field(default_factory=MuscleSlot)
    material: str = "flexible"  # rigid (PLA) | flexible (TPU)
    radius_mm: float = 2.0


@dataclass
class SkeletalGraph:
    nodes: np.ndarray  # (n, 3) mm
    edges: list

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float).reshape(-1, 3)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def edge_index(self) -> np.ndarray:
        return np.array([[e.a, e.b] for e in self.edges], dtype=np.int64).reshape(-1, 2)

    def rest_lengths(self) -> np.ndarray:
        return np.array([e.rest_mm for e in self.edges], dtype=float)

    def lengths(self, positions=None) -> np.ndarray:
        p = self.nodes if positions is None else np.asarray(positions, dtype=float)
        ij = self.edge_index()
        return np.linalg.norm(p[ij[:, 1]] - p[ij[:, 0]], axis=1)

    def is_connected(self) -> bool:
        if self.n_nodes == 0:
            return False
        adj = [[] for _ in range(self.n_nodes)]
        for e in self.edges:
            adj[e.a].append(e.b)
            adj[e.b].append(e.a)
        seen = {0}
        q = deque([0])
        while q:
            u = q.popleft()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    q.append(v)
        return len(seen) == self.n_nodes

    def validate(self, min_edge_mm: float = 30.0, tol: float = 1e-9):
        """Raise ValueError if a graph invariant is broken."""
        if not self.is_connected():
            raise ValueError("skeletal graph is not connected")
        for i, (e, l) in enumerate(zip(self.edges, self.lengths())):
            if abs(e.rest_mm - l) > tol:
                raise ValueError(f"edge {i}: rest length {e.rest_mm} != node distance {l}")
            if e.rest_mm <= min_edge_mm:
                raise ValueError(f"edge {i}: rest length {e.rest_mm} <= {min_edge_mm} mm")

    def to_dict(self) -> dict:
        return {
            "version": GRAPH_VERSION,
            "units": "mm",
            "nodes": [{"id": i, "x": float(x), "y": float(y), "z": float(z)} for i, (x, y, z) in enumerate(self.nodes)],
            "edges": [
                {
                    "a": e.a,
                    "b": e.b,
                    "rest_mm": float(e.rest_mm),
                    "muscles": {
                        "top": {"present": e.top.present, "attachment": e.top.attachment},
                        "bottom": {"present": e.bottom.present, "attachment": e.bottom.attachment},
                    },
                    "material": e.material,
                    "radius_mm": float(e.radius_mm),
                }
                for e in self.edges
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SkeletalGraph":
        if d.get("version") != GRAPH_VERSION:
            raise ValueError(f"unsupported graph version {d.get('version')!r}")
        if d.get("units", "mm") != "mm":
            raise ValueError("graph units must be mm")
        nodes = sorted(d["nodes"], key=lambda n: n["id"])
        pos = np.array([[n["x"], n["y"], n["z"]] for n in nodes], dtype=float)
        edges = []
        for e in d["edges"]:
            m = e.get("muscles", {})
            top = m.get("top", {"present": True})
            bot = m.get("bottom", {"present": True})
            if isinstance(top, bool):
                top = {"present": top}
            if isinstance(bot, bool):
                bot = {"present": bot}
            edges.append(
                Edge(
                    int(e["a"]),
                    int(e["b"]),
                    float(e["rest_mm"]),
                    MuscleSlot(bool(top["present"]), dict(top.get("attachment", {}))),
                    MuscleSlot(bool(bot["present"]), dict(bot.get("attachment", {}))),
                    e.get("material", "flexible"),
                    float(e.get("radius_mm", 2.0)),
                )
            )
        return cls(pos, edges)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def loads(cls, text: str) -> "SkeletalGraph":
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> "SkeletalGraph":
        with open(path) as fh:
            return cls.loads(fh.read())


def graph_from_edges(nodes, edges, material="flexible", radius_mm=2.0) -> SkeletalGraph:
    nodes = np.asarray(nodes, dtype=float)
    if nodes.shape[1] == 2:
        nodes = np.column_stack([nodes, np.zeros(len(nodes))])
    out = []
    for a, b in edges:
        a, b = int(a), int(b)
        out.append(Edge(a, b, float(np.linalg.norm(nodes[b] - nodes[a])), material=material, radius_mm=radius_mm))
    return SkeletalGraph(nodes, out)


def graph_from_flat_mesh(flat, faces, scale_mm: float, material="flexible", radius_mm=2.0) -> SkeletalGraph:
    """One node per flat vertex (z = 0) and one edge per mesh edge, lengths scaled to mm."""
    flat = np.asarray(flat, dtype=float)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if np.any(signed_areas(flat, faces) <= 0):
        raise MeshError("flat mesh has an inverted triangle")
    return graph_from_edges(flat[:, :2] * scale_mm, mesh_edges(faces), material, radius_mm)


@dataclass
class MorphTarget:
    """Per-edge target lengths (mm) and curvature signs for one target shape."""

    target_mm: np.ndarray
    curvature_sign: np.ndarray
    delta: float = 0.02
    target_id: str = "target"
    positions_mm: np.ndarray | None = None  # optional node positions of the target shape

    def __post_init__(self):
        self.target_mm = np.asarray(self.target_mm, dtype=float)
        self.curvature_sign = np.asarray(self.curvature_sign, dtype=np.int64)
        if len(self.target_mm) != len(self.curvature_sign):
            raise ValueError("target_mm and curvature_sign differ in length")
        if not set(np.unique(self.curvature_sign)).issubset({-1, 0, 1}):
            raise ValueError("curvature signs must be in {-1, 0, +1}")
        if self.positions_mm is not None:
            self.positions_mm = np.asarray(self.positions_mm, dtype=float)

    def to_dict(self) -> dict:
        d = {
            "version": TARGET_VERSION,
            "target_id": self.target_id,
            "delta": self.delta,
            "edges": [
                {"edge_id": i, "target_mm": float(t), "curvature_sign": int(s)}
                for i, (t, s) in enumerate(zip(self.target_mm, self.curvature_sign))
            ],
        }
        if self.positions_mm is not None:
            d["positions_mm"] = self.positions_mm.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MorphTarget":
        rows = sorted(d["edges"], key=lambda r: r["edge_id"])
        if [r["edge_id"] for r in rows] != list(range(len(rows))):
            raise ValueError("morph target edge ids must be 0..n-1")
        pos = d.get("positions_mm")
        return cls(
            np.array([r["target_mm"] for r in rows], dtype=float),
            np.array([r["curvature_sign"] for r in rows], dtype=np.int64),
            float(d.get("delta", 0.02)),
            str(d.get("target_id", "target")),
            None if pos is None else np.array(pos, dtype=float),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "MorphTarget":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
