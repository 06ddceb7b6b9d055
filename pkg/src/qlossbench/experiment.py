"""Noisy surface-code memory experiments with qubit loss.

A shot is ``T`` rounds of syndrome extraction followed by a destructive
readout of every data qubit in the memory basis. Data-qubit loss is
persistent; ancilla loss lasts for the round in which it is drawn. Lost
qubits skip every gate and read out as 0.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from qlossbench.errors import (
    BadMagicError,
    FormatError,
    ResourceLimitError,
    SimulationError,
    TruncatedStreamError,
    VersionMismatchError,
)
from qlossbench.lattice import Basis, CodeLayout, NodeKind, build_layout
from qlossbench.stab_sim import Program, run_program

MAGIC = b"QLW1"
VERSION = 1
_HEADER = struct.Struct("<4sHHHB3dQQ")
DEFAULT_MAX_BYTES = 2 << 30
_CHUNK = 2048


@dataclass(frozen=True)
class NoiseParams:
    p_pauli: float = 0.0
    p_meas: float = 0.0
    p_loss: float = 0.0

    def __post_init__(self):
        for name in ("p_pauli", "p_meas", "p_loss"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SimulationError(f"{name}={v} outside [0, 1]")

    @classmethod
    def uniform(cls, p: float) -> "NoiseParams":
        return cls(p, p, p)

    @property
    def is_zero(self) -> bool:
        return self.p_pauli == 0 and self.p_meas == 0 and self.p_loss == 0


@dataclass(frozen=True)
class Injection:
    """Deterministic Pauli applied to ``node`` right after round ``after_round``
    (0 means before round 1)."""

    node: int
    after_round: int
    pauli: str = "X"


@dataclass(frozen=True)
class ForcedLoss:
    """Loss of ``node`` forced at the start of ``round`` (1-based)."""

    node: int
    round: int


@dataclass
class CircuitMap:
    """Built program plus the bookkeeping to slice its raw output."""

    program: Program
    T: int
    n_data: int
    n_ancilla: int
    meas_ancilla: np.ndarray  # (T, A) measurement columns
    meas_final: np.ndarray  # (d*d,) measurement columns
    loss_data: np.ndarray  # (T, d*d) loss columns
    loss_ancilla: np.ndarray  # (T, A) loss columns
    forced_data: np.ndarray  # (T, d*d) bool
    forced_ancilla: np.ndarray  # (T, A) bool


def build_memory_circuit(
    layout: CodeLayout,
    noise: NoiseParams,
    T: int,
    basis: Basis | str,
    injections: Sequence[Injection] = (),
    forced_losses: Sequence[ForcedLoss] = (),
) -> CircuitMap:
    """Lay out the memory experiment as a flat program."""
    if T < 1:
        raise SimulationError(f"need at least one round, got T={T}")
    basis = Basis.parse(basis)
    nd, na = layout.n_data, layout.n_ancilla
    n = layout.n_nodes
    prog = Program(n)
    pp, pm, pl = noise.p_pauli, noise.p_meas, noise.p_loss
    x_anc = [layout.ancilla_node(a) for a in range(na) if layout.ancilla_kinds[a]]
    all_anc = [layout.ancilla_node(a) for a in range(na)]

    forced_data = np.zeros((T, nd), dtype=bool)
    forced_anc = np.zeros((T, na), dtype=bool)
    for fl in forced_losses:
        if not 1 <= fl.round <= T:
            raise SimulationError(f"forced loss round {fl.round} outside 1..{T}")
        if fl.node < nd:
            forced_data[fl.round - 1, fl.node] = True
        else:
            forced_anc[fl.round - 1, fl.node - nd] = True
    inj_by_round: dict[int, list[Injection]] = {}
    for inj in injections:
        inj_by_round.setdefault(inj.after_round, []).append(inj)

    def dep1(q):
        if pp > 0:
            prog.channel("depolarize1", pp, q)

    def emit_injections(r):
        for inj in inj_by_round.get(r, ()):
            prog.gate(inj.pauli, inj.node)

    if basis is Basis.X:
        for q in range(nd):
            prog.gate("H", q)
            dep1(q)
    emit_injections(0)

    meas_anc = np.zeros((T, na), dtype=np.int64)
    loss_data = np.zeros((T, nd), dtype=np.int64)
    loss_anc = np.zeros((T, na), dtype=np.int64)
    for t in range(T):
        for q in range(nd):
            p = 1.0 if forced_data[t, q] else pl
            loss_data[t, q] = prog.loss(q, p)
        for a in range(na):
            p = 1.0 if forced_anc[t, a] else pl
            loss_anc[t, a] = prog.loss(layout.ancilla_node(a), p, transient=True)
        for q in all_anc:
            prog.reset(q)
            dep1(q)
        for q in x_anc:
            prog.gate("H", q)
            dep1(q)
        for layer in layout.schedule:
            busy = set()
            for anc, dat in layer:
                busy.update((anc, dat))
                is_x = layout.nodes[anc].kind is NodeKind.ANCILLA_X
                c, tgt = (anc, dat) if is_x else (dat, anc)
                prog.gate("CX", c, tgt)
                if pp > 0:
                    prog.channel("depolarize2", pp, c, tgt)
            for q in range(n):
                if q not in busy:
                    dep1(q)
        for q in x_anc:
            prog.gate("H", q)
            dep1(q)
        for a in range(na):
            meas_anc[t, a] = prog.measure(layout.ancilla_node(a), pm)
        for q in all_anc:
            prog.restore(q)
        emit_injections(t + 1)

    if basis is Basis.X:
        for q in range(nd):
            prog.gate("H", q)
            dep1(q)
    meas_final = np.array([prog.measure(q, pm) for q in range(nd)], dtype=np.int64)
    return CircuitMap(
        program=prog, T=T, n_data=nd, n_ancilla=na,
        meas_ancilla=meas_anc, meas_final=meas_final,
        loss_data=loss_data, loss_ancilla=loss_anc,
        forced_data=forced_data, forced_ancilla=forced_anc,
    )


def compute_detectors(
    layout: CodeLayout,
    basis: Basis | str,
    ancilla_outcomes: np.ndarray,
    final_readout: np.ndarray,
) -> np.ndarray:
    """Detector volume of shape ``(..., T+1, A)`` from raw outcomes.

    Works on any leading batch axes. Off-basis detectors in the first and
    last slice are defined as 0.
    """
    basis = Basis.parse(basis)
    o = np.asarray(ancilla_outcomes, dtype=np.uint8)
    f = np.asarray(final_readout, dtype=np.uint8)
    na = layout.n_ancilla
    if o.ndim < 2 or o.shape[-1] != na:
        raise SimulationError(f"ancilla_outcomes must end in (T, {na}), got {o.shape}")
    if f.shape[-1] != layout.n_data or f.shape[:-1] != o.shape[:-2]:
        raise SimulationError(
            f"final_readout shape {f.shape} does not match outcomes {o.shape}"
        )
    T = o.shape[-2]
    on = np.zeros(na, dtype=bool)
    on[layout.on_basis_ancillas(basis)] = True
    det = np.zeros(o.shape[:-2] + (T + 1, na), dtype=np.uint8)
    det[..., 0, :] = o[..., 0, :] * on
    det[..., 1:T, :] = o[..., 1:, :] ^ o[..., :-1, :]
    final_checks = stabilizer_values(layout, f)
    det[..., T, :] = (o[..., T - 1, :] ^ final_checks) * on
    return det


def stabilizer_values(layout: CodeLayout, data_bits: np.ndarray) -> np.ndarray:
    """Parity of ``data_bits`` over every ancilla support, shape ``(..., A)``."""
    f = np.asarray(data_bits, dtype=np.uint8)
    out = np.zeros(f.shape[:-1] + (layout.n_ancilla,), dtype=np.uint8)
    for a, sup in enumerate(layout.supports):
        out[..., a] = np.bitwise_xor.reduce(f[..., list(sup)], axis=-1)
    return out


def observable_values(layout: CodeLayout, basis: Basis | str, data_bits: np.ndarray) -> np.ndarray:
    f = np.asarray(data_bits, dtype=np.uint8)
    obs = layout.observables(basis)
    return np.stack(
        [np.bitwise_xor.reduce(f[..., list(sup)], axis=-1) for sup in obs], axis=-1
    )


@dataclass
class ShotRecord:
    """One shot. Arrays are round-major: ``loss_mask_truth`` is ``(T, d*d)``."""

    basis: Basis
    ancilla_outcomes: np.ndarray  # (T, A)
    detectors: np.ndarray  # (T+1, A)
    final_readout: np.ndarray  # (d*d,)
    loss_mask_truth: np.ndarray  # (T, d*d)
    ancilla_loss_truth: np.ndarray  # (T, A)
    logical_labels: np.ndarray  # (d,)
    excluded_observables: np.ndarray  # (d,)

    @property
    def T(self) -> int:
        return self.ancilla_outcomes.shape[0]


_FIELDS = (
    "ancilla_outcomes",
    "detectors",
    "final_readout",
    "loss_mask_truth",
    "ancilla_loss_truth",
    "logical_labels",
    "excluded_observables",
)


@dataclass
class Dataset:
    """Header plus shot-major arrays (leading axis = shot)."""

    d: int
    T: int
    basis: Basis
    noise: NoiseParams
    seed: int
    ancilla_outcomes: np.ndarray
    detectors: np.ndarray
    final_readout: np.ndarray
    loss_mask_truth: np.ndarray
    ancilla_loss_truth: np.ndarray
    logical_labels: np.ndarray
    excluded_observables: np.ndarray
    layout: CodeLayout = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.layout is None:
            self.layout = build_layout(self.d)

    def __len__(self) -> int:
        return self.ancilla_outcomes.shape[0]

    def __getitem__(self, i: int) -> ShotRecord:
        return ShotRecord(self.basis, *(getattr(self, f)[i] for f in _FIELDS))

    def __iter__(self) -> Iterator[ShotRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def records(self) -> list[ShotRecord]:
        return list(self)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.d, self.T, self.basis, self.noise, self.seed,
            *(getattr(self, f)[idx] for f in _FIELDS), layout=self.layout,
        )

    def content_hash(self) -> str:
        return hashlib.sha256(serialize(self)).hexdigest()


def _assemble(
    layout: CodeLayout, cmap: CircuitMap, basis: Basis, meas: np.ndarray, loss: np.ndarray
) -> dict[str, np.ndarray]:
    anc = meas[:, cmap.meas_ancilla]
    final = meas[:, cmap.meas_final]
    fired_data = loss[:, cmap.loss_data].astype(bool) | cmap.forced_data
    loss_mask = np.logical_or.accumulate(fired_data, axis=1)
    anc_loss = loss[:, cmap.loss_ancilla].astype(bool) | cmap.forced_ancilla
    det = compute_detectors(layout, basis, anc, final)
    labels = observable_values(layout, basis, final)
    lost_final = loss_mask[:, -1, :]
    excluded = np.stack(
        [lost_final[:, list(sup)].any(axis=1) for sup in layout.observables(basis)], axis=1
    )
    return {
        "ancilla_outcomes": anc.astype(np.uint8),
        "detectors": det,
        "final_readout": final.astype(np.uint8),
        "loss_mask_truth": loss_mask.astype(np.uint8),
        "ancilla_loss_truth": anc_loss.astype(np.uint8),
        "logical_labels": labels.astype(np.uint8),
        "excluded_observables": excluded.astype(np.uint8),
    }


def _shot_bytes(layout: CodeLayout, T: int, n_meas: int, n_loss: int) -> int:
    nd, na = layout.n_data, layout.n_ancilla
    return n_meas + n_loss + (2 * T + 1) * na + (T + 1) * nd + 2 * layout.d


def sample_dataset(
    layout: CodeLayout,
    noise: NoiseParams,
    T: int,
    basis: Basis | str,
    shots: int,
    seed: int,
    injections: Sequence[Injection] = (),
    forced_losses: Sequence[ForcedLoss] = (),
    max_bytes: int = DEFAULT_MAX_BYTES,
) -> Dataset:
    """Sample ``shots`` independent shots; bit-identical for a fixed seed."""
    if shots < 1:
        raise SimulationError(f"shots must be >= 1, got {shots}")
    basis = Basis.parse(basis)
    cmap = build_memory_circuit(layout, noise, T, basis, injections, forced_losses)
    prog = cmap.program
    need = shots * _shot_bytes(layout, T, prog.n_meas, prog.n_loss)
    if need > max_bytes:
        raise ResourceLimitError(
            f"{shots} shots need ~{need / 2**20:.0f} MiB, above the {max_bytes / 2**20:.0f} MiB limit"
        )
    parts: list[dict[str, np.ndarray]] = []
    for start in range(0, shots, _CHUNK):
        count = min(_CHUNK, shots - start)
        meas, loss = run_program(prog, count, seed, first_shot=start)
        parts.append(_assemble(layout, cmap, basis, meas, loss))
    arrays = {f: np.concatenate([p[f] for p in parts]) for f in _FIELDS}
    return Dataset(layout.d, T, basis, noise, seed, **arrays, layout=layout)


def run_shot(
    layout: CodeLayout,
    noise: NoiseParams,
    T: int,
    basis: Basis | str,
    rng: np.random.Generator | int,
    injections: Sequence[Injection] = (),
    forced_losses: Sequence[ForcedLoss] = (),
) -> ShotRecord:
    """Run a single shot. ``rng`` seeds the shot's random stream."""
    seed = int(rng.integers(2**63)) if isinstance(rng, np.random.Generator) else int(rng)
    return sample_dataset(layout, noise, T, basis, 1, seed, injections, forced_losses)[0]


# --------------------------------------------------------------------------
# binary format


def _pack_rows(bits: np.ndarray) -> bytes:
    """Pack the last axis little-endian, each row padded to a byte."""
    return np.packbits(np.asarray(bits, dtype=np.uint8), axis=-1, bitorder="little").tobytes()


def _section_shapes(ds_d: int, T: int) -> list[tuple[str, tuple[int, ...]]]:
    nd, na = ds_d * ds_d, ds_d * ds_d - 1
    return [
        ("ancilla_outcomes", (T, na)),
        ("detectors", (T + 1, na)),
        ("final_readout", (nd,)),
        ("loss_mask_truth", (T, nd)),
        ("ancilla_loss_truth", (T, na)),
        ("logical_labels", (ds_d,)),
        ("excluded_observables", (ds_d,)),
    ]


def _row_bytes(shape: tuple[int, ...]) -> int:
    rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
    return rows * ((shape[-1] + 7) // 8)


def serialize(dataset: Dataset) -> bytes:
    n = len(dataset)
    header = _HEADER.pack(
        MAGIC, VERSION, dataset.d, dataset.T, dataset.basis.code,
        dataset.noise.p_pauli, dataset.noise.p_meas, dataset.noise.p_loss,
        dataset.seed & 0xFFFFFFFFFFFFFFFF, n,
    )
    # Pack each section for all shots at once, then interleave per shot.
    packed = []
    for name, shape in _section_shapes(dataset.d, dataset.T):
        arr = getattr(dataset, name).reshape((n,) + shape)
        packed.append(
            np.packbits(arr.astype(np.uint8), axis=-1, bitorder="little").reshape(n, -1)
        )
    body = np.concatenate(packed, axis=1)
    return header + body.tobytes()


def deserialize(blob: bytes) -> Dataset:
    if len(blob) < 4:
        raise TruncatedStreamError("stream shorter than the magic number")
    if blob[:4] != MAGIC:
        raise BadMagicError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 6:
        raise TruncatedStreamError("stream ends inside the header")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, this reader supports {VERSION}")
    if len(blob) < _HEADER.size:
        raise TruncatedStreamError("stream ends inside the header")
    _, _, d, T, basis_code, pp, pm, pl, seed, n = _HEADER.unpack_from(blob, 0)
    if basis_code not in (0, 1):
        raise FormatError(f"invalid basis code {basis_code}")
    shapes = _section_shapes(d, T)
    sizes = [_row_bytes(s) for _, s in shapes]
    per_shot = sum(sizes)
    expected = _HEADER.size + n * per_shot
    if len(blob) < expected:
        raise TruncatedStreamError(f"expected {expected} bytes for {n} shots, got {len(blob)}")
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after the last shot")
    body = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(n, per_shot)
    arrays = {}
    off = 0
    for (name, shape), size in zip(shapes, sizes):
        chunk = body[:, off : off + size]
        off += size
        rows = shape[:-1]
        padded = (shape[-1] + 7) // 8
        bits = np.unpackbits(
            chunk.reshape((n,) + rows + (padded,)), axis=-1, count=shape[-1], bitorder="little"
        )
        arrays[name] = bits.astype(np.uint8)
    return Dataset(d, T, Basis.parse(basis_code), NoiseParams(pp, pm, pl), seed, **arrays)


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(dataset))


def load_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def iter_shots(dataset: Dataset, indices: Iterable[int] | None = None) -> Iterator[ShotRecord]:
    for i in range(len(dataset)) if indices is None else indices:
        yield dataset[i]
