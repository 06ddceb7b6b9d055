"""Minimum-weight perfect matching baselines.

The detector graph is built by enumerating every single Pauli fault in the
noisy memory circuit and propagating all of them at once as Pauli frames.
Only detectors of the memory basis become vertices; a fault must flip at
most two of them.

Decoding computes shortest paths between clicked detectors (and the
boundary), then solves an exact minimum-weight perfect matching where any
detector may instead pair with the boundary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import networkx as nx
import numpy as np
from numba import njit
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra

from qlossbench.errors import GraphConstructionError
from qlossbench.experiment import (
    CircuitMap,
    Dataset,
    NoiseParams,
    build_memory_circuit,
    compute_detectors,
)
from qlossbench.lattice import Basis, CodeLayout
from qlossbench.stab_sim import Op, Program

DEFAULT_ERASURE_WEIGHT = 1e-3
DP_CUTOFF = 16
_MIN_WEIGHT = 1e-9
_PAULI_BITS = {1: (1, 0), 2: (1, 1), 3: (0, 1)}


# --------------------------------------------------------------------------
# fault enumeration


@dataclass
class FaultSet:
    """Flat description of every single-fault mechanism of a program."""

    location: np.ndarray  # op index after which the fault acts
    paulis: list[tuple[tuple[int, str], ...]]  # ((qubit, "X"|"Y"|"Z"), ...)
    meas_flip: np.ndarray  # measurement index flipped, or -1
    prob: np.ndarray
    targets: list[tuple[int, ...]]  # qubits of the instruction hosting the fault

    def __len__(self) -> int:
        return len(self.prob)


def enumerate_faults(program: Program) -> FaultSet:
    loc, paulis, mflip, prob, targets = [], [], [], [], []
    for k, (op, a, b, p) in enumerate(program.ops):
        if p <= 0:
            continue
        if op == Op.DEP1:
            for kind in "XYZ":
                loc.append(k); paulis.append(((a, kind),)); mflip.append(-1)
                prob.append(p / 3); targets.append((a,))
        elif op == Op.XFLIP:
            loc.append(k); paulis.append(((a, "X"),)); mflip.append(-1)
            prob.append(p); targets.append((a,))
        elif op == Op.DEP2:
            for code in range(1, 16):
                terms = []
                if code & 3:
                    terms.append((a, "IXYZ"[code & 3]))
                if code >> 2:
                    terms.append((b, "IXYZ"[code >> 2]))
                loc.append(k); paulis.append(tuple(terms)); mflip.append(-1)
                prob.append(p / 15); targets.append((a, b))
        elif op == Op.M:
            loc.append(k); paulis.append(()); mflip.append(b)
            prob.append(p); targets.append((a,))
    return FaultSet(
        np.array(loc, dtype=np.int64), paulis, np.array(mflip, dtype=np.int64),
        np.array(prob, dtype=np.float64), targets,
    )


def propagate_faults(program: Program, faults: FaultSet) -> np.ndarray:
    """Measurement-record flips caused by each fault, shape ``(F, n_meas)``.

    Noiseless Clifford propagation of Pauli frames; one frame per fault.
    """
    F, n = len(faults), program.n
    fx = np.zeros((F, n), dtype=bool)
    fz = np.zeros((F, n), dtype=bool)
    rec = np.zeros((F, program.n_meas), dtype=bool)
    by_loc: dict[int, list[int]] = {}
    for f, k in enumerate(faults.location):
        by_loc.setdefault(int(k), []).append(f)
    for k, (op, a, b, _) in enumerate(program.ops):
        if op == Op.H:
            fx[:, a], fz[:, a] = fz[:, a].copy(), fx[:, a].copy()
        elif op == Op.S:
            fz[:, a] ^= fx[:, a]
        elif op == Op.CX:
            fx[:, b] ^= fx[:, a]
            fz[:, a] ^= fz[:, b]
        elif op == Op.R:
            fx[:, a] = False
            fz[:, a] = False
        elif op == Op.M:
            rec[:, b] = fx[:, a]
        for f in by_loc.get(k, ()):
            if faults.meas_flip[f] >= 0:
                rec[f, faults.meas_flip[f]] ^= True
            for q, kind in faults.paulis[f]:
                xb, zb = _PAULI_BITS["XYZ".index(kind) + 1]
                fx[f, q] ^= bool(xb)
                fz[f, q] ^= bool(zb)
    return rec


# --------------------------------------------------------------------------
# detector graph


@dataclass(eq=False)
class DetectorGraph:
    """Weighted matching graph over the memory-basis detectors.

    Vertex ``slice * len(on_basis) + j`` is the detector of ancilla
    ``on_basis[j]`` in detector slice ``slice`` (0-based); vertex
    ``n_vertices`` is the boundary.
    """

    layout: CodeLayout
    T: int
    basis: Basis
    on_basis: np.ndarray
    u: np.ndarray
    v: np.ndarray
    prob: np.ndarray
    weight: np.ndarray
    flips: np.ndarray  # int64 bitmask over the d observables
    provenance: list[frozenset[int]]  # data qubits whose lone Pauli faults merged here
    descriptions: list[str]
    erased: np.ndarray = field(default=None)
    p_loss: float = 0.0  # per-round data loss rate of the noise model, for erasure priors

    def __post_init__(self):
        if self.erased is None:
            self.erased = np.zeros(len(self.u), dtype=bool)

    @property
    def n_vertices(self) -> int:
        return (self.T + 1) * len(self.on_basis)

    @property
    def boundary(self) -> int:
        return self.n_vertices

    @property
    def n_edges(self) -> int:
        return len(self.u)

    @cached_property
    def edge_slice(self) -> np.ndarray:
        """Latest detector slice touched by each edge."""
        nb = len(self.on_basis)
        su = self.u // nb
        sv = np.where(self.v == self.boundary, su, self.v // nb)
        return np.maximum(su, sv)

    def vertex(self, slice_: int, ancilla: int) -> int:
        j = int(np.searchsorted(self.on_basis, ancilla))
        if j >= len(self.on_basis) or self.on_basis[j] != ancilla:
            raise KeyError(f"ancilla {ancilla} is not a {self.basis.value}-basis check")
        return slice_ * len(self.on_basis) + j

    def detector_vertices(self, detectors: np.ndarray) -> np.ndarray:
        """Clicked vertex ids from a full ``(T+1, A)`` detector volume."""
        det = np.asarray(detectors)
        if det.shape != (self.T + 1, self.layout.n_ancilla):
            raise ValueError(f"detector volume shape {det.shape} does not match the graph")
        return np.flatnonzero(det[:, self.on_basis].reshape(-1))

    @cached_property
    def _csr(self) -> csr_matrix:
        n = self.n_vertices + 1
        w = np.maximum(self.weight, _MIN_WEIGHT)
        return csr_matrix(
            (np.concatenate([w, w]), (np.concatenate([self.u, self.v]), np.concatenate([self.v, self.u]))),
            shape=(n, n),
        )

    @cached_property
    def _edge_index(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): e for e, (a, b) in enumerate(zip(self.u, self.v))}

    @cached_property
    def all_pairs(self) -> tuple[np.ndarray, np.ndarray]:
        return dijkstra(self._csr, directed=False, return_predecessors=True)

    def edge_between(self, a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        return self._edge_index[key]

    def to_dict(self) -> dict:
        return {
            "d": self.layout.d,
            "T": self.T,
            "basis": self.basis.value,
            "n_vertices": self.n_vertices,
            "boundary": self.boundary,
            "vertices": [
                {"id": s * len(self.on_basis) + j, "slice": s, "ancilla": int(a)}
                for s in range(self.T + 1)
                for j, a in enumerate(self.on_basis)
            ],
            "edges": [
                {
                    "u": int(self.u[e]),
                    "v": int(self.v[e]),
                    "weight": float(self.weight[e]),
                    "probability": float(self.prob[e]),
                    "observables": int(self.flips[e]),
                    "data_qubits": sorted(self.provenance[e]),
                    "provenance": self.descriptions[e],
                }
                for e in range(self.n_edges)
            ],
        }

    def dump(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _merge(p1: float, p2: float) -> float:
    return p1 * (1 - p2) + p2 * (1 - p1)


def fault_signatures(
    layout: CodeLayout, cmap: CircuitMap, basis: Basis, faults: FaultSet
) -> tuple[np.ndarray, np.ndarray]:
    """Detector volumes ``(F, T+1, A)`` and observable flips ``(F, d)``."""
    rec = propagate_faults(cmap.program, faults).astype(np.uint8)
    anc = rec[:, cmap.meas_ancilla]
    final = rec[:, cmap.meas_final]
    det = compute_detectors(layout, basis, anc, final)
    obs = np.stack(
        [np.bitwise_xor.reduce(final[:, list(s)], axis=1) for s in layout.observables(basis)],
        axis=1,
    )
    return det, obs


def build_detector_graph(
    layout: CodeLayout, noise: NoiseParams, T: int, basis: Basis | str
) -> DetectorGraph:
    basis = Basis.parse(basis)
    # Loss never enters the matching model.
    cmap = build_memory_circuit(layout, NoiseParams(noise.p_pauli, noise.p_meas, 0.0), T, basis)
    faults = enumerate_faults(cmap.program)
    on = layout.on_basis_ancillas(basis)
    V = (T + 1) * len(on)
    if len(faults):
        det, obs = fault_signatures(layout, cmap, basis, faults)
        on_det = det[:, :, on].reshape(len(faults), -1)
        weights_obs = (obs.astype(np.int64) << np.arange(layout.d, dtype=np.int64)).sum(axis=1)
    else:
        on_det = np.zeros((0, V), dtype=np.uint8)
        weights_obs = np.zeros(0, dtype=np.int64)

    edges: dict[tuple[int, int], dict] = {}
    nd = layout.n_data
    for f in range(len(faults)):
        hits = np.flatnonzero(on_det[f])
        if len(hits) > 2:
            raise GraphConstructionError(
                f"fault {faults.paulis[f] or 'measurement flip'} at op {faults.location[f]} "
                f"flips {len(hits)} memory-basis detectors {hits.tolist()}"
            )
        if len(hits) == 0:
            if weights_obs[f]:
                raise GraphConstructionError(
                    f"undetectable logical fault {faults.paulis[f]} at op {faults.location[f]}"
                )
            continue
        key = (int(hits[0]), int(hits[1])) if len(hits) == 2 else (int(hits[0]), V)
        p = float(faults.prob[f])
        terms = faults.paulis[f]
        prov = frozenset([terms[0][0]]) if len(terms) == 1 and terms[0][0] < nd else frozenset()
        desc = (
            f"op{faults.location[f]}:" + ("".join(f"{k}{q}" for q, k in faults.paulis[f]) or "MFLIP")
        )
        slot = edges.get(key)
        if slot is None:
            edges[key] = {"p": p, "best": p, "flip": int(weights_obs[f]), "prov": set(prov), "desc": [desc]}
        else:
            slot["p"] = _merge(slot["p"], p)
            slot["prov"].update(prov)
            slot["desc"].append(desc)
            if p > slot["best"]:
                slot["best"] = p
                slot["flip"] = int(weights_obs[f])

    keys = sorted(edges)
    prob = np.array([edges[k]["p"] for k in keys], dtype=np.float64)
    return DetectorGraph(
        layout=layout,
        T=T,
        basis=basis,
        on_basis=on,
        u=np.array([k[0] for k in keys], dtype=np.int64),
        v=np.array([k[1] for k in keys], dtype=np.int64),
        prob=prob,
        weight=np.log((1 - prob) / prob),
        flips=np.array([edges[k]["flip"] for k in keys], dtype=np.int64),
        provenance=[frozenset(edges[k]["prov"]) for k in keys],
        descriptions=[";".join(edges[k]["desc"]) for k in keys],
        p_loss=float(noise.p_loss),
    )


def onset_prior(graph: DetectorGraph) -> np.ndarray:
    """Chance that a qubit lost by the end was already lost at each edge's slice.

    A qubit lost in round ``r`` (1-based) flickers from detector slice
    ``r - 1`` on. Onsets follow the per-round loss rate, conditioned on
    the loss having happened by round ``T``; a zero rate gives the uniform
    limit.
    """
    T = graph.T
    rounds = np.minimum(graph.edge_slice + 1, T).astype(np.float64)
    p = graph.p_loss
    if p <= 0.0:
        return rounds / T
    return (1.0 - (1.0 - p) ** rounds) / (1.0 - (1.0 - p) ** T)


def erasure_reweight(
    graph: DetectorGraph,
    loss_locations,
    eps: float = DEFAULT_ERASURE_WEIGHT,
    onset: str = "marginal",
) -> DetectorGraph:
    """Copy of ``graph`` with edges of lost data qubits made cheap.

    An edge belongs to qubit ``q`` when a Pauli fault acting on ``q`` alone
    produces it. Only locations are known, not loss times. With
    ``onset="flat"`` every such edge gets weight ``eps`` in every round.
    With ``onset="marginal"`` (default) the edge probability becomes
    ``pi / 2 + (1 - pi) * p``, where ``pi`` is the chance the loss had
    already happened at that edge's slice (a lost qubit flips its checks
    as a fair coin); weights are floored at ``eps``. Weights never grow.
    """
    lost = {int(q) for q in loss_locations}
    bad = [q for q in lost if not 0 <= q < graph.layout.n_data]
    if bad:
        raise ValueError(f"unknown data qubits {sorted(bad)}")
    if onset not in ("marginal", "flat"):
        raise ValueError(f"onset must be 'marginal' or 'flat', got {onset!r}")
    if not lost:
        return graph
    hit = np.array([bool(p & lost) for p in graph.provenance], dtype=bool)
    weight = graph.weight.copy()
    if onset == "flat":
        new = np.full(hit.sum(), eps)
    else:
        pi = onset_prior(graph)[hit]
        p = 0.5 * pi + (1.0 - pi) * graph.prob[hit]
        new = np.maximum(np.log((1.0 - p) / p), eps)
    weight[hit] = np.minimum(weight[hit], new)
    return DetectorGraph(
        layout=graph.layout, T=graph.T, basis=graph.basis, on_basis=graph.on_basis,
        u=graph.u, v=graph.v, prob=graph.prob, weight=weight, flips=graph.flips,
        provenance=graph.provenance, descriptions=graph.descriptions,
        erased=graph.erased | hit, p_loss=graph.p_loss,
    )


# --------------------------------------------------------------------------
# exact matching


@njit(cache=True)
def _dp_matching(pair_w, bound_w):
    k = bound_w.shape[0]
    size = 1 << k
    dp = np.empty(size, dtype=np.float64)
    choice = np.empty(size, dtype=np.int64)
    dp[0] = 0.0
    choice[0] = -2
    for mask in range(1, size):
        i = 0
        while not (mask >> i) & 1:
            i += 1
        rest = mask ^ (1 << i)
        best = bound_w[i] + dp[rest]
        pick = -1
        for j in range(i + 1, k):
            if (rest >> j) & 1:
                cand = pair_w[i, j] + dp[rest ^ (1 << j)]
                if cand < best - 1e-12:
                    best = cand
                    pick = j
        dp[mask] = best
        choice[mask] = pick
    pairs = np.empty((k, 2), dtype=np.int64)
    n_pairs = 0
    mask = size - 1
    while mask:
        i = 0
        while not (mask >> i) & 1:
            i += 1
        j = choice[mask]
        pairs[n_pairs, 0] = i
        pairs[n_pairs, 1] = j
        n_pairs += 1
        mask ^= 1 << i
        if j >= 0:
            mask ^= 1 << j
    return dp[size - 1], pairs[:n_pairs]


def _useful_pairs(pair_w: np.ndarray, bound_w: np.ndarray) -> np.ndarray:
    """Pairs cheaper than sending both ends to the boundary.

    Any other pair can be swapped for two boundary matches at no extra
    cost, so an optimal matching exists that uses only these.
    """
    useful = pair_w < bound_w[:, None] + bound_w[None, :]
    np.fill_diagonal(useful, False)
    return useful


def _blossom_matching(pair_w: np.ndarray, bound_w: np.ndarray) -> tuple[float, list[tuple[int, int]]]:
    # Node i has a boundary copy k+i. Copies are joined only where the
    # originals are, which is enough: a matched pair (i, j) leaves copies
    # (k+i, k+j) to pair with each other.
    k = len(bound_w)
    big = float(max(pair_w.max(initial=0.0), bound_w.max(initial=0.0))) + 1.0
    g = nx.Graph()
    for i in range(k):
        g.add_edge(i, k + i, weight=big - bound_w[i])
    for i, j in zip(*np.nonzero(np.triu(_useful_pairs(pair_w, bound_w)))):
        g.add_edge(int(i), int(j), weight=big - pair_w[i, j])
        g.add_edge(k + int(i), k + int(j), weight=big)
    mate = nx.max_weight_matching(g, maxcardinality=True)
    pairs = []
    total = 0.0
    for a, b in mate:
        a, b = min(a, b), max(a, b)
        if b < k:
            pairs.append((a, b))
            total += pair_w[a, b]
        elif a < k:
            pairs.append((a, -1))
            total += bound_w[a]
    return total, sorted(pairs)


def _components(pair_w: np.ndarray, bound_w: np.ndarray) -> list[np.ndarray]:
    """Split nodes into groups that can be matched independently.

    Only pairs from ``_useful_pairs`` connect nodes, so the split is exact.
    """
    k = len(bound_w)
    useful = _useful_pairs(pair_w, bound_w)
    label = -np.ones(k, dtype=np.int64)
    groups = []
    for start in range(k):
        if label[start] >= 0:
            continue
        stack = [start]
        label[start] = len(groups)
        members = []
        while stack:
            u = stack.pop()
            members.append(u)
            for v in np.flatnonzero(useful[u]):
                if label[v] < 0:
                    label[v] = len(groups)
                    stack.append(v)
        groups.append(np.array(sorted(members), dtype=np.int64))
    return groups


def min_weight_matching(
    pair_w: np.ndarray, bound_w: np.ndarray, method: str = "auto"
) -> tuple[float, list[tuple[int, int]]]:
    """Exact minimum-weight perfect matching with a duplicable boundary.

    Returns ``(total_weight, pairs)`` with ``(i, -1)`` marking a boundary
    match. ``method`` is ``"dp"`` (subset dynamic programming over all
    nodes), ``"blossom"`` (networkx blossom over all nodes), or ``"auto"``
    (independent components, each by dp up to ``DP_CUTOFF`` nodes, else
    blossom).
    """
    pair_w = np.ascontiguousarray(pair_w, dtype=np.float64)
    bound_w = np.ascontiguousarray(bound_w, dtype=np.float64)
    k = len(bound_w)
    if k == 0:
        return 0.0, []
    if method == "dp":
        total, pairs = _dp_matching(pair_w, bound_w)
        return float(total), sorted((int(a), int(b)) for a, b in pairs)
    if method == "blossom":
        return _blossom_matching(pair_w, bound_w)
    if method != "auto":
        raise ValueError(f"unknown matching method {method!r}")
    total = 0.0
    out: list[tuple[int, int]] = []
    for idx in _components(pair_w, bound_w):
        if len(idx) == 1:
            total += bound_w[idx[0]]
            out.append((int(idx[0]), -1))
            continue
        sub_w = np.ascontiguousarray(pair_w[np.ix_(idx, idx)])
        sub_b = np.ascontiguousarray(bound_w[idx])
        sub = "dp" if len(idx) <= DP_CUTOFF else "blossom"
        t, pairs = min_weight_matching(sub_w, sub_b, sub)
        total += t
        out.extend((int(idx[a]), -1 if b < 0 else int(idx[b])) for a, b in pairs)
    return total, sorted(out)


@dataclass
class MatchResult:
    prediction: np.ndarray  # (d,) uint8
    weight: float
    pairs: list[tuple[int, int]]  # vertex ids; boundary is graph.boundary


def _path_flip(graph: DetectorGraph, pred_row: np.ndarray, src: int, dst: int) -> int:
    flip = 0
    cur = dst
    while cur != src:
        prev = int(pred_row[cur])
        if prev < 0:
            raise RuntimeError(f"no path between vertices {src} and {dst}")
        flip ^= int(graph.flips[graph.edge_between(prev, cur)])
        cur = prev
    return flip


def mwpm_decode(graph: DetectorGraph, detector_bits: np.ndarray, method: str = "auto") -> MatchResult:
    """Decode one shot's ``(T+1, A)`` detector volume into ``d`` observable flips."""
    clicked = graph.detector_vertices(detector_bits)
    d = graph.layout.d
    if len(clicked) == 0:
        return MatchResult(np.zeros(d, dtype=np.uint8), 0.0, [])
    B = graph.boundary
    if graph.erased.any():
        sources = np.append(clicked, B)
        dist, pred = dijkstra(graph._csr, directed=False, indices=sources, return_predecessors=True)
        row_of = {int(s): r for r, s in enumerate(sources)}
    else:
        dist, pred = graph.all_pairs
        row_of = None

    def row(vtx: int) -> int:
        return vtx if row_of is None else row_of[vtx]

    rows = [row(int(c)) for c in clicked]
    pair_w = dist[np.ix_(rows, clicked)]
    bound_w = dist[rows, B]
    total, pairs = min_weight_matching(pair_w, bound_w, method)
    flip = 0
    out_pairs = []
    for i, j in pairs:
        a = int(clicked[i])
        b = B if j < 0 else int(clicked[j])
        flip ^= _path_flip(graph, pred[row(a)], a, b)
        out_pairs.append((a, b))
    prediction = ((flip >> np.arange(d)) & 1).astype(np.uint8)
    return MatchResult(prediction, float(total), out_pairs)


def decode_dataset(
    graph: DetectorGraph,
    dataset: Dataset,
    erasure: bool = False,
    eps: float = DEFAULT_ERASURE_WEIGHT,
    onset: str = "marginal",
) -> np.ndarray:
    """Predicted observable flips ``(shots, d)``.

    With ``erasure=True`` each shot's graph is reweighted with that shot's
    final-round lost data qubits (the privileged delayed-erasure baseline).
    """
    out = np.zeros((len(dataset), dataset.d), dtype=np.uint8)
    cache: dict[frozenset, DetectorGraph] = {}
    for s in range(len(dataset)):
        g = graph
        if erasure:
            lost = frozenset(np.flatnonzero(dataset.loss_mask_truth[s, -1]).tolist())
            if lost:
                g = cache.get(lost)
                if g is None:
                    g = erasure_reweight(graph, lost, eps, onset)
                    if len(cache) < 4096:
                        cache[lost] = g
        out[s] = mwpm_decode(g, dataset.detectors[s]).prediction
    return out
