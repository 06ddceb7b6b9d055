"""Likelihood-ratio loss detector built on detector flicker.

A lost data qubit turns every check that touches it into a fair coin, while
a healthy check clicks at the small Pauli background rate. For each data
qubit and each candidate onset round the score compares the two hypotheses
over the qubit's adjacent detectors from that round on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from qlossbench.experiment import NoiseParams, sample_dataset
from qlossbench.lattice import Basis, CodeLayout


@dataclass(frozen=True)
class FlickerScore:
    """Scores for one shot ``(n_data, T)`` or a batch ``(B, n_data, T)``.

    ``onset[..., q, r]`` is the log-likelihood ratio of "qubit q lost since
    round r + 1" against "never lost".
    """

    onset: np.ndarray
    background_rate: float

    @property
    def score(self) -> np.ndarray:
        """Evidence that the qubit was lost at or before each round.

        Running maximum of ``onset`` over rounds, so a flag never switches
        off once raised, matching the persistence of data loss.
        """
        return np.maximum.accumulate(self.onset, axis=-1)

    @property
    def per_qubit(self) -> np.ndarray:
        return self.onset.max(axis=-1)

    def probabilities(self, prior_log_odds: float = 0.0) -> np.ndarray:
        """Posterior-style loss probabilities ``sigmoid(score + prior)``."""
        return expit(self.score + prior_log_odds)


def valid_slots(layout: CodeLayout, T: int, basis: Basis | str) -> np.ndarray:
    """Detector slots that are not forced to zero, shape ``(T+1, A)``."""
    basis = Basis.parse(basis)
    ok = np.ones((T + 1, layout.n_ancilla), dtype=bool)
    off = np.ones(layout.n_ancilla, dtype=bool)
    off[layout.on_basis_ancillas(basis)] = False
    ok[0, off] = False
    ok[T, off] = False
    return ok


def _incidence(layout: CodeLayout) -> np.ndarray:
    inc = np.zeros((layout.n_ancilla, layout.n_data), dtype=np.float64)
    for q, nbrs in enumerate(layout.data_neighbors):
        inc[list(nbrs), q] = 1.0
    return inc


def flicker_scores(
    detectors: np.ndarray,
    layout: CodeLayout,
    background_rate: float,
    basis: Basis | str = Basis.Z,
) -> FlickerScore:
    """Score every data qubit and onset round from a detector volume.

    ``detectors`` is ``(T+1, A)`` or ``(B, T+1, A)``. Structural zero slots
    (off-basis checks in the first and last slice) carry no evidence and are
    skipped.
    """
    b = float(background_rate)
    if not 0.0 < b < 0.5:
        raise ValueError(f"background_rate must lie in (0, 0.5), got {background_rate!r}")
    det = np.asarray(detectors)
    single = det.ndim == 2
    if single:
        det = det[None]
    if det.ndim != 3 or det.shape[2] != layout.n_ancilla:
        raise ValueError(f"detector volume shape {np.shape(detectors)} does not fit d={layout.d}")
    T = det.shape[1] - 1
    if T < 1:
        raise ValueError("need at least one syndrome round")

    click_llr = np.log(0.5 / b)
    quiet_llr = np.log(0.5 / (1.0 - b))
    slot = np.where(det.astype(bool), click_llr, quiet_llr)
    slot *= valid_slots(layout, T, basis)
    per_slice = slot @ _incidence(layout)  # (B, T+1, n_data)
    # onset round r (1-based) flickers from slice r-1 on: reverse cumulative sum
    tail = np.flip(np.cumsum(np.flip(per_slice, axis=1), axis=1), axis=1)
    onset = np.ascontiguousarray(np.moveaxis(tail[:, :T], 1, 2))
    if single:
        onset = onset[0]
    return FlickerScore(onset=onset, background_rate=b)


def classify(scores: FlickerScore, threshold: float) -> np.ndarray:
    """Predicted loss mask, 1 where the score reaches ``threshold``."""
    return (scores.score >= threshold).astype(np.uint8)


def calibrate_background(
    layout: CodeLayout,
    noise: NoiseParams,
    T: int,
    basis: Basis | str = Basis.Z,
    shots: int = 2000,
    seed: int = 0,
) -> float:
    """Mean click rate of non-structural detectors in a loss-free run.

    Uses ``(clicks + 0.5) / (slots + 1)`` so the estimate stays strictly
    inside ``(0, 0.5)`` even for a noiseless model.
    """
    ds = sample_dataset(
        layout, NoiseParams(noise.p_pauli, noise.p_meas, 0.0), T, basis, shots, seed
    )
    ok = valid_slots(layout, T, basis)
    clicks = float(ds.detectors[:, ok].sum())
    slots = float(ok.sum()) * len(ds)
    return min((clicks + 0.5) / (slots + 1.0), 0.499)


def prior_log_odds(p_loss: float, T: int) -> float:
    """Log odds that a data qubit is lost by the final round."""
    if p_loss <= 0.0:
        return -np.inf
    p = 1.0 - (1.0 - p_loss) ** T
    return float(np.log(p / (1.0 - p)))
