from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import GATES as MATS
from oracles import Dense, chi_square_pvalue, exact_distribution, random_program, record_counts
from qlossbench.errors import SimulationError
from qlossbench.stab_sim import PauliString, Program, Tableau, run_program

GATES = ["H", "S", "X", "Y", "Z"]


def _pauli_chars(p: PauliString) -> str:
    return str(p)[1:]


def _assert_same_state(tab: Tableau, dense: Dense) -> None:
    for stab in tab.stabilizers():
        assert dense.expectation(_pauli_chars(stab), stab.sign) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), steps=st.integers(1, 40))
def test_tableau_tracks_state_vector(seed, n, steps):
    """Lockstep run: after every step the tableau stabilizers fix the dense state."""
    rng = np.random.default_rng(seed)
    tab, dense = Tableau(n), Dense(n)
    for _ in range(steps):
        roll = rng.random()
        if roll < 0.6 or n == 1:
            g, q = str(rng.choice(GATES)), int(rng.integers(n))
            tab.apply(g, q)
            dense.apply1(MATS[g], q)
        elif roll < 0.85:
            a, b = (int(v) for v in rng.choice(n, 2, replace=False))
            tab.apply("CX", a, b)
            dense.cx(a, b)
        else:
            q = int(rng.integers(n))
            p1 = dense.prob_one(q)
            bit, det = tab.measure_z(q, rng)
            if det:
                assert p1 == pytest.approx(float(bit), abs=1e-9)
            else:
                assert p1 == pytest.approx(0.5, abs=1e-9)
            dense.project(q, bit)
        _assert_same_state(tab, dense)


def test_measure_pauli_matches_dense():
    rng = np.random.default_rng(3)
    for _ in range(30):
        n = 4
        tab, dense = Tableau(n), Dense(n)
        for _ in range(20):
            g, q = str(rng.choice(GATES)), int(rng.integers(n))
            tab.apply(g, q)
            dense.apply1(MATS[g], q)
            a, b = (int(v) for v in rng.choice(n, 2, replace=False))
            tab.apply("CX", a, b)
            dense.cx(a, b)
        chars = "".join(rng.choice(list("IXYZ"), n))
        if set(chars) == {"I"}:
            chars = "Z" + chars[1:]
        p = PauliString.from_str(chars)
        exp = dense.expectation(chars)
        bit, det = tab.measure_pauli(p, rng)
        if det:
            assert exp == pytest.approx(1 - 2 * bit, abs=1e-9)
        else:
            assert exp == pytest.approx(0.0, abs=1e-9)
        dense.project_pauli(chars, 1, bit)
        _assert_same_state(tab, dense)


def test_bell_pair_correlation():
    prog = Program(2)
    prog.gate("H", 0)
    prog.gate("CX", 0, 1)
    prog.measure(0)
    prog.measure(1)
    meas, loss = run_program(prog, 4000, seed=9)
    assert loss.shape == (4000, 0)
    assert np.array_equal(meas[:, 0], meas[:, 1])
    assert 0.45 < meas[:, 0].mean() < 0.55


def test_run_program_is_reproducible_and_chunkable():
    prog = random_program(np.random.default_rng(8), n_max=5, n_ops=20)
    a, la = run_program(prog, 500, seed=42)
    b, lb = run_program(prog, 500, seed=42)
    assert np.array_equal(a, b) and np.array_equal(la, lb)
    c1, _ = run_program(prog, 200, seed=42)
    c2, _ = run_program(prog, 300, seed=42, first_shot=200)
    assert np.array_equal(np.concatenate([c1, c2]), a)


def test_lost_qubit_reads_zero_and_skips_gates():
    prog = Program(2)
    prog.gate("X", 0)
    prog.loss(0, 1.0)
    prog.gate("X", 0)
    prog.gate("CX", 0, 1)
    prog.measure(0)
    prog.measure(1)
    meas, loss = run_program(prog, 50, seed=0)
    assert np.all(loss[:, 0] == 1)
    assert np.all(meas == 0)


def test_transient_loss_is_undone_by_restore():
    prog = Program(1)
    prog.loss(0, 1.0, transient=True)
    prog.restore(0)
    prog.gate("X", 0)
    prog.measure(0)
    meas, _ = run_program(prog, 20, seed=1)
    assert np.all(meas[:, 0] == 1)


def test_measurement_flip_rate():
    prog = Program(1)
    prog.measure(0, flip=0.2)
    meas, _ = run_program(prog, 20000, seed=5)
    assert abs(meas.mean() - 0.2) < 0.015


@pytest.mark.parametrize("seed", range(8))
def test_small_random_programs_match_exact_distribution(seed):
    prog = random_program(np.random.default_rng(seed))
    exact = exact_distribution(prog)
    meas, loss = run_program(prog, 20000, seed=seed)
    assert chi_square_pvalue(record_counts(meas, loss), exact, 20000) > 1e-4


def test_exact_distribution_with_loss():
    prog = Program(2)
    prog.gate("H", 0)
    prog.loss(0, 0.3)
    prog.gate("CX", 0, 1)
    prog.measure(1)
    exact = exact_distribution(prog)
    meas, loss = run_program(prog, 30000, seed=2)
    assert chi_square_pvalue(record_counts(meas, loss), exact, 30000) > 1e-4


def test_program_validation():
    prog = Program(2)
    with pytest.raises(SimulationError):
        prog.gate("CX", 0, 0)
    with pytest.raises(SimulationError):
        prog.gate("H", 5)
    with pytest.raises(SimulationError):
        prog.measure(0, flip=1.5)
    with pytest.raises(SimulationError):
        prog.channel("amplitude_damping", 0.1, 0)
    with pytest.raises(SimulationError):
        run_program(prog, -1, seed=0)


def test_tableau_validation():
    with pytest.raises(SimulationError):
        Tableau(0)
    t = Tableau(2)
    with pytest.raises(SimulationError):
        t.apply("CX", 1, 1)
    with pytest.raises(SimulationError):
        t.apply("T", 0)
    with pytest.raises(SimulationError):
        t.measure_pauli(PauliString.from_str("II"), np.random.default_rng(0))
    with pytest.raises(ValueError):
        PauliString.from_str("XQ")


def test_reset_and_copy():
    rng = np.random.default_rng(0)
    t = Tableau(1).apply("H", 0)
    c = t.copy()
    t.reset_z(0, rng)
    assert t.measure_z(0, rng) == (0, True)
    assert c.measure_z(0, rng)[1] is False


def test_pauli_string_roundtrip():
    p = PauliString.from_str("-XYZI")
    assert str(p) == "-XYZI"
    assert p.n == 4
    assert str(PauliString.from_sparse(3, {1: "Y"})) == "+IYI"
