"""Bit-packed stabilizer tableau simulator (Aaronson-Gottesman) with loss.

Two entry points share the same numba kernels:

* :class:`Tableau` -- an interactive, single-state object used directly by
  tests and small experiments. Randomness comes from a numpy ``Generator``.
* :class:`Program` / :func:`run_program` -- a flat instruction list executed
  for many shots inside compiled code, one counter-based random stream per
  shot. This is what the memory experiment uses.

Qubit loss is not a tableau operation. A lost qubit keeps its columns; every
gate, channel, and reset touching it is skipped, and its measurements read 0.
Measuring the reduced checks of the surviving qubits then produces the
anticommutation flicker on its own.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np
from numba import njit

from qlossbench.errors import SimulationError

_U1 = np.uint64(1)
_M1 = np.uint64(0x5555555555555555)
_M2 = np.uint64(0x3333333333333333)
_M4 = np.uint64(0x0F0F0F0F0F0F0F0F)
_H01 = np.uint64(0x0101010101010101)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


# --------------------------------------------------------------------------
# counter-based RNG: splitmix64 keyed per shot


@njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def shot_key(seed, shot):
    """Stream key for ``shot`` under master ``seed`` (both uint64)."""
    return _mix64(_mix64(seed ^ _GOLDEN) + (shot + _U1) * _GOLDEN)


@njit(cache=True, inline="always")
def _uniform(key, counter):
    """Uniform float in [0, 1) from ``(key, counter)``; pure function."""
    v = _mix64(key + counter * _GOLDEN)
    return np.float64(v >> np.uint64(11)) * (1.0 / 9007199254740992.0)


# --------------------------------------------------------------------------
# tableau kernels. Arrays: x, z uint64[(2n+1), W]; r uint8[2n+1].
# Rows 0..n-1 destabilizers, n..2n-1 stabilizers, row 2n scratch.


@njit(cache=True, inline="always")
def _popcount(v):
    v = v - ((v >> _U1) & _M1)
    v = (v & _M2) + ((v >> np.uint64(2)) & _M2)
    v = (v + (v >> np.uint64(4))) & _M4
    return np.int64((v * _H01) >> np.uint64(56))


@njit(cache=True)
def _rowsum(x, z, r, h, i):
    """Row h <- row i * row h with exact sign tracking."""
    acc = 2 * np.int64(r[h]) + 2 * np.int64(r[i])
    for w in range(x.shape[1]):
        x1 = x[i, w]
        z1 = z[i, w]
        x2 = x[h, w]
        z2 = z[h, w]
        nx2 = ~x2
        nz2 = ~z2
        plus = (x1 & z1 & nx2 & z2) | (x1 & ~z1 & x2 & z2) | (~x1 & z1 & x2 & nz2)
        minus = (x1 & z1 & x2 & nz2) | (x1 & ~z1 & nx2 & z2) | (~x1 & z1 & x2 & z2)
        acc += _popcount(plus) - _popcount(minus)
        x[h, w] = x2 ^ x1
        z[h, w] = z2 ^ z1
    r[h] = np.uint8(1) if (acc % 4) == 2 else np.uint8(0)


@njit(cache=True)
def _init_tableau(x, z, r, n):
    x[:, :] = 0
    z[:, :] = 0
    r[:] = 0
    for q in range(n):
        w = q >> 6
        b = _U1 << np.uint64(q & 63)
        x[q, w] |= b
        z[n + q, w] |= b


@njit(cache=True)
def _h(x, z, r, n, q):
    w = q >> 6
    s = np.uint64(q & 63)
    for i in range(2 * n):
        xb = (x[i, w] >> s) & _U1
        zb = (z[i, w] >> s) & _U1
        if xb & zb:
            r[i] ^= np.uint8(1)
        if xb != zb:
            x[i, w] ^= _U1 << s
            z[i, w] ^= _U1 << s


@njit(cache=True)
def _s(x, z, r, n, q):
    w = q >> 6
    s = np.uint64(q & 63)
    for i in range(2 * n):
        xb = (x[i, w] >> s) & _U1
        zb = (z[i, w] >> s) & _U1
        if xb & zb:
            r[i] ^= np.uint8(1)
        z[i, w] ^= xb << s


@njit(cache=True)
def _cx(x, z, r, n, c, t):
    wc = c >> 6
    sc = np.uint64(c & 63)
    wt = t >> 6
    st = np.uint64(t & 63)
    for i in range(2 * n):
        xc = (x[i, wc] >> sc) & _U1
        zc = (z[i, wc] >> sc) & _U1
        xt = (x[i, wt] >> st) & _U1
        zt = (z[i, wt] >> st) & _U1
        if xc & zt & (xt ^ zc ^ _U1):
            r[i] ^= np.uint8(1)
        x[i, wt] ^= xc << st
        z[i, wc] ^= zt << sc


@njit(cache=True)
def _pauli(x, z, r, n, q, kind):
    """Apply Pauli ``kind`` (1=X, 2=Y, 3=Z) to qubit ``q``."""
    w = q >> 6
    s = np.uint64(q & 63)
    for i in range(2 * n):
        xb = (x[i, w] >> s) & _U1
        zb = (z[i, w] >> s) & _U1
        if kind == 1:
            flip = zb
        elif kind == 2:
            flip = xb ^ zb
        else:
            flip = xb
        if flip:
            r[i] ^= np.uint8(1)


@njit(cache=True)
def _measure_z(x, z, r, n, q, coin):
    """Measure Z_q. Returns ``outcome + 2 * deterministic``; ``coin`` is used
    as the outcome when the result is random."""
    w = q >> 6
    s = np.uint64(q & 63)
    p = -1
    for i in range(n, 2 * n):
        if (x[i, w] >> s) & _U1:
            p = i
            break
    if p >= 0:
        for i in range(2 * n):
            if i != p and ((x[i, w] >> s) & _U1):
                _rowsum(x, z, r, i, p)
        for k in range(x.shape[1]):
            x[p - n, k] = x[p, k]
            z[p - n, k] = z[p, k]
            x[p, k] = 0
            z[p, k] = 0
        r[p - n] = r[p]
        z[p, w] = _U1 << s
        r[p] = np.uint8(coin)
        return np.int64(coin)
    m = 2 * n
    for k in range(x.shape[1]):
        x[m, k] = 0
        z[m, k] = 0
    r[m] = 0
    for i in range(n):
        if (x[i, w] >> s) & _U1:
            _rowsum(x, z, r, m, i + n)
    return np.int64(r[m]) + 2


@njit(cache=True)
def _anticommutes(x, z, i, px, pz):
    acc = np.uint64(0)
    for k in range(x.shape[1]):
        acc ^= (x[i, k] & pz[k]) ^ (z[i, k] & px[k])
    return _popcount(acc) & 1


@njit(cache=True)
def _measure_pauli(x, z, r, n, px, pz, sign, coin):
    """Measure ``(-1)^sign * P``. Same return convention as ``_measure_z``."""
    p = -1
    for i in range(n, 2 * n):
        if _anticommutes(x, z, i, px, pz):
            p = i
            break
    if p >= 0:
        for i in range(2 * n):
            if i != p and _anticommutes(x, z, i, px, pz):
                _rowsum(x, z, r, i, p)
        for k in range(x.shape[1]):
            x[p - n, k] = x[p, k]
            z[p - n, k] = z[p, k]
            x[p, k] = px[k]
            z[p, k] = pz[k]
        r[p - n] = r[p]
        r[p] = np.uint8(coin ^ sign)
        return np.int64(coin)
    m = 2 * n
    for k in range(x.shape[1]):
        x[m, k] = 0
        z[m, k] = 0
    r[m] = 0
    for i in range(n):
        if _anticommutes(x, z, i, px, pz):
            _rowsum(x, z, r, m, i + n)
    return np.int64(r[m] ^ sign) + 2


# --------------------------------------------------------------------------
# flat programs


class Op(IntEnum):
    H = 0
    S = 1
    X = 2
    Y = 3
    Z = 4
    CX = 5
    R = 6  # reset to |0>
    M = 7  # Z measurement; prob = pre-measurement flip probability
    DEP1 = 8
    DEP2 = 9
    XFLIP = 10
    LOSS = 11  # persistent loss w.p. prob (1.0 forces it)
    LOSS_T = 12  # transient loss w.p. prob, cleared by RESTORE
    RESTORE = 13  # end of transient loss


_SINGLE_GATES = {"H": Op.H, "S": Op.S, "X": Op.X, "Y": Op.Y, "Z": Op.Z}


@dataclass
class Program:
    """Append-only instruction list over ``n`` qubits.

    Measurements and loss instructions are numbered in program order; the
    runner returns one column per measurement and one per loss instruction.
    """

    n: int
    ops: list[tuple[int, int, int, float]] = field(default_factory=list)
    n_meas: int = 0
    n_loss: int = 0

    def _check(self, *qs: int) -> None:
        for q in qs:
            if not 0 <= q < self.n:
                raise SimulationError(f"qubit {q} out of range for n={self.n}")
        if len(set(qs)) != len(qs):
            raise SimulationError(f"duplicate targets {qs}")

    def _prob(self, p: float) -> float:
        if not 0.0 <= p <= 1.0:
            raise SimulationError(f"probability {p} outside [0, 1]")
        return float(p)

    def gate(self, name: str, *targets: int) -> int:
        if name == "CX":
            self._check(*targets)
            if len(targets) != 2:
                raise SimulationError("CX needs two targets")
            self.ops.append((Op.CX, targets[0], targets[1], 0.0))
        else:
            (q,) = targets
            self._check(q)
            self.ops.append((_SINGLE_GATES[name], q, -1, 0.0))
        return len(self.ops) - 1

    def reset(self, q: int) -> None:
        self._check(q)
        self.ops.append((Op.R, q, -1, 0.0))

    def measure(self, q: int, flip: float = 0.0) -> int:
        self._check(q)
        self.ops.append((Op.M, q, self.n_meas, self._prob(flip)))
        self.n_meas += 1
        return self.n_meas - 1

    def channel(self, kind: str, p: float, *targets: int) -> None:
        p = self._prob(p)
        self._check(*targets)
        if kind == "depolarize1":
            (q,) = targets
            self.ops.append((Op.DEP1, q, -1, p))
        elif kind == "depolarize2":
            a, b = targets
            self.ops.append((Op.DEP2, a, b, p))
        elif kind == "flip_x":
            (q,) = targets
            self.ops.append((Op.XFLIP, q, -1, p))
        else:
            raise SimulationError(f"unknown channel {kind!r}")

    def loss(self, q: int, p: float, transient: bool = False) -> int:
        self._check(q)
        op = Op.LOSS_T if transient else Op.LOSS
        self.ops.append((op, q, self.n_loss, self._prob(p)))
        self.n_loss += 1
        return self.n_loss - 1

    def restore(self, q: int) -> None:
        self._check(q)
        self.ops.append((Op.RESTORE, q, -1, 0.0))

    def inserted(self, after: int, gates: Sequence[tuple[str, int]]) -> "Program":
        """Copy with single-qubit Pauli/Clifford ``gates`` placed right after
        instruction ``after`` (``-1`` puts them first)."""
        out = Program(self.n, list(self.ops), self.n_meas, self.n_loss)
        new = [(_SINGLE_GATES[g], q, -1, 0.0) for g, q in gates]
        out.ops[after + 1 : after + 1] = new
        return out

    def compiled(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.ops:
            return np.zeros((0, 3), np.int64), np.zeros(0, np.float64)
        arr = np.array([(o, a, b) for o, a, b, _ in self.ops], dtype=np.int64)
        probs = np.array([p for *_, p in self.ops], dtype=np.float64)
        return arr, probs


@njit(cache=True)
def _run_shot(ops, probs, n, x, z, r, lost, key, meas, loss_out):
    _init_tableau(x, z, r, n)
    lost[:] = False
    ctr = np.uint64(0)
    for k in range(ops.shape[0]):
        op = ops[k, 0]
        a = ops[k, 1]
        b = ops[k, 2]
        p = probs[k]
        if op == 7:  # M
            if lost[a]:
                meas[b] = 0
                continue
            coin = 1 if _uniform(key, ctr) < 0.5 else 0
            ctr += _U1
            out = _measure_z(x, z, r, n, a, coin) & 1
            if p > 0.0:
                if _uniform(key, ctr) < p:
                    out ^= 1
                ctr += _U1
            meas[b] = out
        elif op == 11 or op == 12:  # LOSS / LOSS_T
            fired = 0
            if not lost[a]:
                if p >= 1.0:
                    fired = 1
                elif p > 0.0:
                    if _uniform(key, ctr) < p:
                        fired = 1
                    ctr += _U1
            if fired:
                lost[a] = True
            loss_out[b] = fired
        elif op == 13:
            lost[a] = False
        elif op == 5:
            if not (lost[a] or lost[b]):
                _cx(x, z, r, n, a, b)
        elif op == 9:  # DEP2
            if lost[a] or lost[b] or p <= 0.0:
                continue
            u = _uniform(key, ctr)
            ctr += _U1
            if u < p:
                pick = 1 + np.int64(_uniform(key, ctr) * 15.0)
                ctr += _U1
                if pick > 15:
                    pick = 15
                pa = pick & 3
                pb = pick >> 2
                if pa:
                    _pauli(x, z, r, n, a, pa)
                if pb:
                    _pauli(x, z, r, n, b, pb)
        else:
            if lost[a]:
                continue
            if op == 0:
                _h(x, z, r, n, a)
            elif op == 1:
                _s(x, z, r, n, a)
            elif op == 2 or op == 3 or op == 4:
                _pauli(x, z, r, n, a, op - 1)
            elif op == 6:
                coin = 1 if _uniform(key, ctr) < 0.5 else 0
                ctr += _U1
                if _measure_z(x, z, r, n, a, coin) & 1:
                    _pauli(x, z, r, n, a, 1)
            elif op == 8:  # DEP1
                if p > 0.0:
                    if _uniform(key, ctr) < p:
                        ctr += _U1
                        pick = 1 + np.int64(_uniform(key, ctr) * 3.0)
                        if pick > 3:
                            pick = 3
                        _pauli(x, z, r, n, a, pick)
                    ctr += _U1
            elif op == 10:  # XFLIP
                if p > 0.0:
                    if _uniform(key, ctr) < p:
                        _pauli(x, z, r, n, a, 1)
                    ctr += _U1


@njit(cache=True)
def _run_many(ops, probs, n, n_meas, n_loss, seed, first_shot, shots):
    words = (n + 63) >> 6
    x = np.zeros((2 * n + 1, words), dtype=np.uint64)
    z = np.zeros((2 * n + 1, words), dtype=np.uint64)
    r = np.zeros(2 * n + 1, dtype=np.uint8)
    lost = np.zeros(n, dtype=np.bool_)
    meas = np.zeros((shots, n_meas), dtype=np.uint8)
    loss = np.zeros((shots, n_loss), dtype=np.uint8)
    for s in range(shots):
        key = shot_key(seed, np.uint64(first_shot + s))
        _run_shot(ops, probs, n, x, z, r, lost, key, meas[s], loss[s])
    return meas, loss


def run_program(
    program: Program, shots: int, seed: int, first_shot: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Run ``program`` for ``shots`` independent shots.

    Shot ``k`` uses stream ``(seed, first_shot + k)``, so any split of a shot
    range into chunks reproduces the same bits. Returns ``(measurements,
    loss_fired)`` as uint8 arrays of shape ``(shots, n_meas)`` and
    ``(shots, n_loss)``.
    """
    if shots < 0:
        raise SimulationError("shots must be non-negative")
    ops, probs = program.compiled()
    return _run_many(
        ops, probs, program.n, program.n_meas, program.n_loss,
        np.uint64(seed & 0xFFFFFFFFFFFFFFFF), first_shot, shots,
    )


# --------------------------------------------------------------------------
# interactive objects


_PAULI_CHARS = {"I": (0, 0), "X": (1, 0), "Y": (1, 1), "Z": (0, 1)}


@dataclass(frozen=True)
class PauliString:
    """Hermitian Pauli operator ``sign * P_0 P_1 ...`` with ``sign`` in ±1."""

    xs: np.ndarray
    zs: np.ndarray
    sign: int = 1

    @classmethod
    def from_str(cls, text: str) -> "PauliString":
        """Parse ``"+XZI"`` / ``"-YY"`` / ``"ZZ"`` (qubit 0 first)."""
        sign = 1
        if text and text[0] in "+-":
            sign = -1 if text[0] == "-" else 1
            text = text[1:]
        try:
            bits = [_PAULI_CHARS[c] for c in text.upper().replace("_", "I")]
        except KeyError as exc:
            raise ValueError(f"bad Pauli character in {text!r}") from exc
        xs = np.array([b[0] for b in bits], dtype=bool)
        zs = np.array([b[1] for b in bits], dtype=bool)
        return cls(xs, zs, sign)

    @classmethod
    def from_sparse(cls, n: int, terms: dict[int, str], sign: int = 1) -> "PauliString":
        chars = ["I"] * n
        for q, c in terms.items():
            chars[q] = c
        p = cls.from_str("".join(chars))
        return cls(p.xs, p.zs, sign)

    @property
    def n(self) -> int:
        return len(self.xs)

    def __str__(self) -> str:
        out = []
        for xb, zb in zip(self.xs, self.zs):
            out.append("IZXY"[int(xb) * 2 + int(zb)])
        return ("+" if self.sign > 0 else "-") + "".join(out)

    def packed(self) -> tuple[np.ndarray, np.ndarray]:
        return _pack_bits(self.xs), _pack_bits(self.zs)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    n = len(bits)
    words = np.zeros((n + 63) // 64, dtype=np.uint64)
    for q in np.flatnonzero(bits):
        words[q >> 6] |= np.uint64(1) << np.uint64(q & 63)
    return words


class Tableau:
    """Stabilizer state on ``n`` qubits, initialised to ``|0...0>``."""

    def __init__(self, n: int):
        if int(n) < 1:
            raise SimulationError(f"need at least one qubit, got {n}")
        self.n = int(n)
        words = (self.n + 63) // 64
        self.x = np.zeros((2 * self.n + 1, words), dtype=np.uint64)
        self.z = np.zeros((2 * self.n + 1, words), dtype=np.uint64)
        self.r = np.zeros(2 * self.n + 1, dtype=np.uint8)
        _init_tableau(self.x, self.z, self.r, self.n)

    def copy(self) -> "Tableau":
        t = Tableau.__new__(Tableau)
        t.n = self.n
        t.x, t.z, t.r = self.x.copy(), self.z.copy(), self.r.copy()
        return t

    def _q(self, q: int) -> int:
        q = int(q)
        if not 0 <= q < self.n:
            raise SimulationError(f"qubit {q} out of range for n={self.n}")
        return q

    def _row(self, i: int) -> PauliString:
        bits = np.arange(self.n)
        xs = ((self.x[i, bits >> 6] >> (bits & 63).astype(np.uint64)) & np.uint64(1)).astype(bool)
        zs = ((self.z[i, bits >> 6] >> (bits & 63).astype(np.uint64)) & np.uint64(1)).astype(bool)
        return PauliString(xs, zs, -1 if self.r[i] else 1)

    def stabilizers(self) -> list[PauliString]:
        return [self._row(self.n + i) for i in range(self.n)]

    def destabilizers(self) -> list[PauliString]:
        return [self._row(i) for i in range(self.n)]

    def apply(self, gate: str, *targets: int) -> "Tableau":
        """Apply one of H, S, CX, X, Y, Z."""
        qs = [self._q(q) for q in targets]
        if gate == "CX":
            if len(qs) != 2 or qs[0] == qs[1]:
                raise SimulationError(f"CX needs two distinct targets, got {targets}")
            _cx(self.x, self.z, self.r, self.n, qs[0], qs[1])
            return self
        if len(qs) != 1:
            raise SimulationError(f"{gate} takes exactly one target")
        q = qs[0]
        if gate == "H":
            _h(self.x, self.z, self.r, self.n, q)
        elif gate == "S":
            _s(self.x, self.z, self.r, self.n, q)
        elif gate in ("X", "Y", "Z"):
            _pauli(self.x, self.z, self.r, self.n, q, "XYZ".index(gate) + 1)
        else:
            raise SimulationError(f"unsupported gate {gate!r}")
        return self

    def measure_z(self, q: int, rng: np.random.Generator) -> tuple[int, bool]:
        q = self._q(q)
        coin = int(rng.integers(2))
        res = _measure_z(self.x, self.z, self.r, self.n, q, coin)
        return int(res & 1), bool(res >> 1)

    def measure_pauli(self, p: PauliString, rng: np.random.Generator) -> tuple[int, bool]:
        if p.n != self.n:
            raise SimulationError(f"Pauli acts on {p.n} qubits, tableau has {self.n}")
        if not (p.xs.any() or p.zs.any()):
            raise SimulationError("cannot measure the identity")
        px, pz = p.packed()
        coin = int(rng.integers(2))
        res = _measure_pauli(self.x, self.z, self.r, self.n, px, pz, 1 if p.sign < 0 else 0, coin)
        return int(res & 1), bool(res >> 1)

    def reset_z(self, q: int, rng: np.random.Generator | None = None) -> "Tableau":
        q = self._q(q)
        rng = rng if rng is not None else np.random.default_rng()
        bit, _ = self.measure_z(q, rng)
        if bit:
            _pauli(self.x, self.z, self.r, self.n, q, 1)
        return self

    def apply_pauli_channel(
        self, kind: str, p: float, targets, rng: np.random.Generator
    ) -> "Tableau":
        """``depolarize1`` / ``depolarize2`` / ``flip_x`` with probability ``p``."""
        if not 0.0 <= p <= 1.0:
            raise SimulationError(f"probability {p} outside [0, 1]")
        qs = [self._q(q) for q in np.atleast_1d(targets)]
        if kind == "depolarize1":
            for q in qs:
                if rng.random() < p:
                    _pauli(self.x, self.z, self.r, self.n, q, int(rng.integers(1, 4)))
        elif kind == "flip_x":
            for q in qs:
                if rng.random() < p:
                    _pauli(self.x, self.z, self.r, self.n, q, 1)
        elif kind == "depolarize2":
            if len(qs) % 2 or any(a == b for a, b in zip(qs[::2], qs[1::2])):
                raise SimulationError("depolarize2 needs distinct target pairs")
            for a, b in zip(qs[::2], qs[1::2]):
                if rng.random() < p:
                    pick = int(rng.integers(1, 16))
                    if pick & 3:
                        _pauli(self.x, self.z, self.r, self.n, a, pick & 3)
                    if pick >> 2:
                        _pauli(self.x, self.z, self.r, self.n, b, pick >> 2)
        else:
            raise SimulationError(f"unknown channel {kind!r}")
        return self


def new_tableau(n: int) -> Tableau:
    return Tableau(n)
