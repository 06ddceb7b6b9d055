"""Rotated surface-code geometry.

Data qubits sit at odd-odd coordinates ``(x, y)`` with ``x, y in 1..2d-1``;
ancillas sit at even-even coordinates. ``y`` grows downward, so "row i" is
the set of data qubits with ``y = 2i + 1``.

Boundary orientation: X-type weight-2 checks live on the top and bottom
edges, Z-type on the left and right edges. Z logical observables are rows,
X logical observables are columns.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property

import numpy as np

from qlossbench.errors import LayoutError

# Per-ancilla interaction order, offsets (dx, dy) from the ancilla.
NW, NE, SW, SE = (-1, -1), (1, -1), (-1, 1), (1, 1)
X_ORDER = (NW, NE, SW, SE)  # "Z" shape: hook pair (SW, SE) is horizontal
Z_ORDER = (NW, SW, NE, SE)  # "N" shape: hook pair (NE, SE) is vertical

DEFAULT_DISTANCE_CAP = 8


class NodeKind(str, Enum):
    DATA = "data"
    ANCILLA_X = "ancilla_x"
    ANCILLA_Z = "ancilla_z"


class Basis(str, Enum):
    Z = "Z"
    X = "X"

    @classmethod
    def parse(cls, value: "Basis | str | int") -> "Basis":
        if isinstance(value, Basis):
            return value
        if isinstance(value, int):
            return (cls.Z, cls.X)[value]
        try:
            return cls(str(value).upper())
        except ValueError:
            raise ValueError(f"basis must be 'X' or 'Z', got {value!r}") from None

    @property
    def code(self) -> int:
        return 0 if self is Basis.Z else 1

    @property
    def ancilla_kind(self) -> NodeKind:
        """Ancilla kind whose checks are deterministic in this memory basis."""
        return NodeKind.ANCILLA_Z if self is Basis.Z else NodeKind.ANCILLA_X


@dataclass(frozen=True)
class Node:
    index: int
    kind: NodeKind
    coord: tuple[int, int]

    @property
    def is_data(self) -> bool:
        return self.kind is NodeKind.DATA


def _checker_kind(x: int, y: int) -> NodeKind:
    return NodeKind.ANCILLA_X if ((x // 2 + y // 2) % 2 == 0) else NodeKind.ANCILLA_Z


@dataclass(frozen=True, eq=False)
class CodeLayout:
    """Immutable distance-``d`` rotated surface-code patch.

    ``tanner_edges`` and ``schedule`` entries are ``(ancilla_node, data_node)``
    pairs of global node indices. Data nodes occupy indices ``0 .. d*d-1``
    (row-major), ancillas follow in row-major coordinate order.
    """

    d: int
    nodes: tuple[Node, ...]
    tanner_edges: tuple[tuple[int, int], ...]
    schedule: tuple[tuple[tuple[int, int], ...], ...]
    observables_z: tuple[tuple[int, ...], ...]
    observables_x: tuple[tuple[int, ...], ...]

    @property
    def n_data(self) -> int:
        return self.d * self.d

    @property
    def n_ancilla(self) -> int:
        return self.d * self.d - 1

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def data_nodes(self) -> tuple[Node, ...]:
        return self.nodes[: self.n_data]

    @property
    def ancilla_nodes(self) -> tuple[Node, ...]:
        return self.nodes[self.n_data :]

    def ancilla_node(self, a: int) -> int:
        """Global node index of ancilla number ``a``."""
        return self.n_data + a

    @cached_property
    def ancilla_kinds(self) -> np.ndarray:
        """Boolean array over ancillas: True for X-type."""
        return np.array([n.kind is NodeKind.ANCILLA_X for n in self.ancilla_nodes])

    def on_basis_ancillas(self, basis: Basis | str) -> np.ndarray:
        basis = Basis.parse(basis)
        want_x = basis is Basis.X
        return np.flatnonzero(self.ancilla_kinds == want_x)

    @cached_property
    def supports(self) -> tuple[tuple[int, ...], ...]:
        """Data support of each ancilla (by ancilla number), in schedule order."""
        order: dict[int, list[tuple[int, int]]] = {a.index: [] for a in self.ancilla_nodes}
        for layer_no, layer in enumerate(self.schedule):
            for anc, dat in layer:
                order[anc].append((layer_no, dat))
        return tuple(
            tuple(dat for _, dat in sorted(order[a.index])) for a in self.ancilla_nodes
        )

    @cached_property
    def data_neighbors(self) -> tuple[tuple[int, ...], ...]:
        """Ancilla numbers adjacent to each data qubit."""
        nbrs: list[list[int]] = [[] for _ in range(self.n_data)]
        for a, sup in enumerate(self.supports):
            for q in sup:
                nbrs[q].append(a)
        return tuple(tuple(sorted(v)) for v in nbrs)

    def observables(self, basis: Basis | str) -> tuple[tuple[int, ...], ...]:
        return self.observables_z if Basis.parse(basis) is Basis.Z else self.observables_x

    @cached_property
    def adjacency(self) -> tuple[tuple[int, ...], ...]:
        adj: list[set[int]] = [set() for _ in range(self.n_nodes)]
        for a, q in self.tanner_edges:
            adj[a].add(q)
            adj[q].add(a)
        return tuple(tuple(sorted(s)) for s in adj)

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "nodes": [
                {"index": n.index, "kind": n.kind.value, "coord": list(n.coord)}
                for n in self.nodes
            ],
            "tanner_edges": [list(e) for e in self.tanner_edges],
            "schedule": [[list(p) for p in layer] for layer in self.schedule],
            "observables_z": [list(o) for o in self.observables_z],
            "observables_x": [list(o) for o in self.observables_x],
        }

    def dump(self) -> str:
        """Structured-text export used for golden-file comparisons."""
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def build_layout(d: int) -> CodeLayout:
    if not isinstance(d, (int, np.integer)) or d < 3 or d % 2 == 0:
        raise LayoutError(f"code distance must be an odd integer >= 3, got {d!r}")
    d = int(d)
    hi = 2 * d

    nodes: list[Node] = []
    data_at: dict[tuple[int, int], int] = {}
    for i in range(d):
        for j in range(d):
            c = (2 * j + 1, 2 * i + 1)
            data_at[c] = len(nodes)
            nodes.append(Node(len(nodes), NodeKind.DATA, c))

    for y in range(0, hi + 1, 2):
        for x in range(0, hi + 1, 2):
            kind = _checker_kind(x, y)
            touching = [(x + dx, y + dy) for dx, dy in X_ORDER if (x + dx, y + dy) in data_at]
            if len(touching) < 2:
                continue
            on_tb = y in (0, hi)
            on_lr = x in (0, hi)
            if on_tb and kind is not NodeKind.ANCILLA_X:
                continue
            if on_lr and kind is not NodeKind.ANCILLA_Z:
                continue
            nodes.append(Node(len(nodes), kind, (x, y)))

    edges: list[tuple[int, int]] = []
    layers: list[list[tuple[int, int]]] = [[], [], [], []]
    for node in nodes[d * d :]:
        x, y = node.coord
        order = X_ORDER if node.kind is NodeKind.ANCILLA_X else Z_ORDER
        for layer_no, (dx, dy) in enumerate(order):
            q = data_at.get((x + dx, y + dy))
            if q is None:
                continue
            edges.append((node.index, q))
            layers[layer_no].append((node.index, q))

    rows = tuple(tuple(i * d + j for j in range(d)) for i in range(d))
    cols = tuple(tuple(i * d + j for i in range(d)) for j in range(d))
    layout = CodeLayout(
        d=d,
        nodes=tuple(nodes),
        tanner_edges=tuple(sorted(edges)),
        schedule=tuple(tuple(sorted(layer)) for layer in layers),
        observables_z=rows,
        observables_x=cols,
    )
    if layout.n_nodes != 2 * d * d - 1:
        raise LayoutError("internal: wrong ancilla count")  # pragma: no cover
    return layout


def observable_supports(layout: CodeLayout, basis: Basis | str) -> tuple[tuple[int, ...], ...]:
    return layout.observables(basis)


@dataclass(frozen=True, eq=False)
class DistanceMatrix:
    dist: np.ndarray
    cap: int

    def __getitem__(self, key):
        return self.dist[key]


def shortest_distances(layout: CodeLayout, cap: int = DEFAULT_DISTANCE_CAP) -> DistanceMatrix:
    """All-pairs breadth-first hop counts on the Tanner graph, clipped at ``cap``."""
    n = layout.n_nodes
    adj = layout.adjacency
    dist = np.full((n, n), cap, dtype=np.int64)
    for src in range(n):
        seen = {src: 0}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            du = seen[u]
            for v in adj[u]:
                if v not in seen:
                    seen[v] = du + 1
                    queue.append(v)
        for v, dv in seen.items():
            dist[src, v] = min(dv, cap)
    return DistanceMatrix(dist=dist, cap=cap)
