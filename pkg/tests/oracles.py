"""Independent reference implementations used only by the tests."""

from __future__ import annotations

from collections import defaultdict

import numpy as np
from scipy import stats

from qlossbench.stab_sim import Op, Program

_I = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_S = np.array([[1, 0], [0, 1j]], dtype=complex)
PAULIS = [_I, _X, _Y, _Z]
GATES = {"H": _H, "S": _S, "X": _X, "Y": _Y, "Z": _Z}


class Dense:
    """Plain state-vector simulator, qubit ``q`` is tensor axis ``q``."""

    def __init__(self, n: int):
        self.n = n
        self.psi = np.zeros((2,) * n, dtype=complex)
        self.psi[(0,) * n] = 1.0

    def copy(self) -> "Dense":
        d = Dense.__new__(Dense)
        d.n = self.n
        d.psi = self.psi.copy()
        return d

    def apply1(self, mat: np.ndarray, q: int) -> None:
        self.psi = np.moveaxis(np.tensordot(mat, self.psi, axes=([1], [q])), 0, q)

    def cx(self, c: int, t: int) -> None:
        idx = [slice(None)] * self.n
        idx[c] = 1
        sub = self.psi[tuple(idx)]
        t_ax = t if t < c else t - 1
        self.psi[tuple(idx)] = np.flip(sub, axis=t_ax)

    def prob_one(self, q: int) -> float:
        idx = [slice(None)] * self.n
        idx[q] = 1
        return float(np.sum(np.abs(self.psi[tuple(idx)]) ** 2))

    def project(self, q: int, bit: int) -> float:
        idx = [slice(None)] * self.n
        idx[q] = 1 - bit
        self.psi[tuple(idx)] = 0
        norm = np.sqrt(np.sum(np.abs(self.psi) ** 2))
        if norm > 0:
            self.psi /= norm
        return norm**2

    def pauli_matrix_apply(self, chars: str) -> np.ndarray:
        out = self.psi
        for q, c in enumerate(chars):
            mat = PAULIS["IXYZ".index(c)]
            out = np.moveaxis(np.tensordot(mat, out, axes=([1], [q])), 0, q)
        return out

    def expectation(self, chars: str, sign: int = 1) -> float:
        v = self.pauli_matrix_apply(chars)
        return sign * float(np.real(np.vdot(self.psi, v)))

    def project_pauli(self, chars: str, sign: int, bit: int) -> None:
        v = self.pauli_matrix_apply(chars) * sign
        eig = 1 if bit == 0 else -1
        self.psi = 0.5 * (self.psi + eig * v)
        norm = np.sqrt(np.sum(np.abs(self.psi) ** 2))
        if norm > 0:
            self.psi /= norm


def exact_distribution(program: Program, tol: float = 1e-12) -> dict[tuple, float]:
    """Exact joint distribution of (measurement record, loss record).

    Enumerates every branch of every channel, loss draw, and measurement.
    """
    n = program.n
    branches = [(1.0, Dense(n), (), (), frozenset())]
    for op, a, b, p in program.ops:
        new = []
        for prob, st, rec, lrec, lost in branches:
            if op == Op.M:
                if a in lost:
                    new.append((prob, st, rec + (0,), lrec, lost))
                    continue
                p1 = st.prob_one(a)
                for bit, pb in ((0, 1 - p1), (1, p1)):
                    if pb * prob < tol:
                        continue
                    s2 = st.copy()
                    s2.project(a, bit)
                    for flip, pf in ((0, 1 - p), (1, p)):
                        if pf == 0:
                            continue
                        new.append((prob * pb * pf, s2, rec + (bit ^ flip,), lrec, lost))
            elif op in (Op.LOSS, Op.LOSS_T):
                if a in lost:
                    new.append((prob, st, rec, lrec + (0,), lost))
                    continue
                if p < 1:
                    new.append((prob * (1 - p), st, rec, lrec + (0,), lost))
                if p > 0:
                    new.append((prob * p, st, rec, lrec + (1,), lost | {a}))
            elif op == Op.RESTORE:
                new.append((prob, st, rec, lrec, lost - {a}))
            elif a in lost or (op in (Op.CX, Op.DEP2) and b in lost):
                new.append((prob, st, rec, lrec, lost))
            elif op == Op.CX:
                s2 = st.copy()
                s2.cx(a, b)
                new.append((prob, s2, rec, lrec, lost))
            elif op in (Op.H, Op.S, Op.X, Op.Y, Op.Z):
                s2 = st.copy()
                s2.apply1(GATES[Op(op).name], a)
                new.append((prob, s2, rec, lrec, lost))
            elif op == Op.R:
                p1 = st.prob_one(a)
                for bit, pb in ((0, 1 - p1), (1, p1)):
                    if pb * prob < tol:
                        continue
                    s2 = st.copy()
                    s2.project(a, bit)
                    if bit:
                        s2.apply1(_X, a)
                    new.append((prob * pb, s2, rec, lrec, lost))
            elif op in (Op.DEP1, Op.XFLIP):
                opts = [(0, 1 - p)]
                if op == Op.DEP1:
                    opts += [(k, p / 3) for k in (1, 2, 3)]
                else:
                    opts += [(1, p)]
                for k, pk in opts:
                    if pk == 0:
                        continue
                    s2 = st.copy()
                    if k:
                        s2.apply1(PAULIS[k], a)
                    new.append((prob * pk, s2, rec, lrec, lost))
            elif op == Op.DEP2:
                opts = [((0, 0), 1 - p)] + [
                    ((k & 3, k >> 2), p / 15) for k in range(1, 16)
                ]
                for (ka, kb), pk in opts:
                    if pk == 0:
                        continue
                    s2 = st.copy()
                    if ka:
                        s2.apply1(PAULIS[ka], a)
                    if kb:
                        s2.apply1(PAULIS[kb], b)
                    new.append((prob * pk, s2, rec, lrec, lost))
            else:  # pragma: no cover
                raise AssertionError(op)
        branches = new
    dist: dict[tuple, float] = defaultdict(float)
    for prob, _, rec, lrec, _ in branches:
        dist[rec + lrec] += prob
    return dict(dist)


def chi_square_pvalue(counts: dict[tuple, int], expected_probs: dict[tuple, float], shots: int) -> float:
    """Chi-square goodness of fit; bins with expectation < 5 are pooled."""
    for key in counts:
        if expected_probs.get(key, 0.0) <= 0.0:
            return 0.0
    keys = sorted(expected_probs, key=lambda k: expected_probs[k])
    obs, exp = [], []
    pool_o, pool_e = 0.0, 0.0
    for k in keys:
        e = expected_probs[k] * shots
        o = counts.get(k, 0)
        if e < 5:
            pool_o += o
            pool_e += e
        else:
            obs.append(o)
            exp.append(e)
    if pool_e > 0:
        if pool_e < 5 and obs:
            obs[0] += pool_o
            exp[0] += pool_e
        else:
            obs.append(pool_o)
            exp.append(pool_e)
    if len(obs) < 2:
        return 1.0
    obs_a, exp_a = np.array(obs, float), np.array(exp, float)
    exp_a *= obs_a.sum() / exp_a.sum()
    return float(stats.chisquare(obs_a, exp_a).pvalue)


def record_counts(meas: np.ndarray, loss: np.ndarray) -> dict[tuple, int]:
    both = np.concatenate([meas, loss], axis=1)
    if both.shape[1] == 0:
        return {(): len(both)}
    uniq, cnt = np.unique(both, axis=0, return_counts=True)
    return {tuple(int(v) for v in row): int(c) for row, c in zip(uniq, cnt)}


def random_program(rng: np.random.Generator, n_max: int = 6, n_ops: int = 14) -> Program:
    """Random Clifford circuit with channels and measurements on <= n_max qubits.

    Branch count is bounded by keeping the number of noisy and measuring
    instructions small.
    """
    n = int(rng.integers(1, n_max + 1))
    prog = Program(n)
    n_noise = 0
    n_meas = 0
    for _ in range(n_ops):
        roll = rng.random()
        if roll < 0.55 or n == 1 and roll < 0.65:
            prog.gate(str(rng.choice(["H", "S", "X", "Y", "Z", "H", "S"])), int(rng.integers(n)))
        elif roll < 0.7 and n >= 2:
            a, b = rng.choice(n, size=2, replace=False)
            prog.gate("CX", int(a), int(b))
        elif roll < 0.8 and n_meas < 4:
            prog.measure(int(rng.integers(n)), flip=float(rng.choice([0.0, 0.0, 0.1])))
            n_meas += 1
        elif roll < 0.85:
            prog.reset(int(rng.integers(n)))
        elif n_noise < 2:
            kind = rng.choice(["depolarize1", "flip_x", "depolarize2"])
            p = float(rng.choice([0.05, 0.2, 0.5]))
            if kind == "depolarize2" and n >= 2:
                a, b = rng.choice(n, size=2, replace=False)
                prog.channel("depolarize2", p, int(a), int(b))
            elif kind != "depolarize2":
                prog.channel(str(kind), p, int(rng.integers(n)))
            n_noise += 1
    for q in range(n):
        if rng.random() < 0.5:
            prog.gate(str(rng.choice(["H", "S"])), q)
        prog.measure(q)
    return prog


def brute_force_min_matching(
    pair_w: np.ndarray, bound_w: np.ndarray
) -> float:
    """Exhaustive minimum over all perfect matchings where each node pairs
    with another node or with a (duplicable) boundary."""
    k = len(bound_w)
    best = np.inf

    def rec(remaining: tuple[int, ...], acc: float) -> None:
        nonlocal best
        if not remaining:
            best = min(best, acc)
            return
        i = remaining[0]
        rest = remaining[1:]
        rec(rest, acc + bound_w[i])
        for idx, j in enumerate(rest):
            rec(rest[:idx] + rest[idx + 1 :], acc + pair_w[i, j])

    rec(tuple(range(k)), 0.0)
    return best

