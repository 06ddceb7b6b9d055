"""Evaluation harness: logical accuracy, loss identification, latency."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

DEFAULT_GRID = np.round(np.linspace(0.0, 1.0, 21), 10)


def _field(records, name: str) -> np.ndarray:
    """Stack a field from a Dataset (shot-major arrays) or a list of ShotRecords."""
    arr = getattr(records, name, None)
    if arr is not None:
        return np.asarray(arr)
    return np.stack([getattr(r, name) for r in records])


# --------------------------------------------------------------------------
# logical accuracy


@dataclass
class LogicalAccuracy:
    accuracy: float
    scored: int  # (shot, observable) pairs that were kept
    correct: int
    per_observable: list[float | None]
    shots_dropped: int  # shots with every observable excluded


def logical_accuracy(predictions: np.ndarray, records) -> LogicalAccuracy:
    """Mean success over all (shot, kept observable) pairs.

    Observables whose support touches a qubit lost by the final round are
    dropped; shots with nothing left contribute nothing.
    """
    pred = np.asarray(predictions)
    labels = _field(records, "logical_labels")
    excluded = _field(records, "excluded_observables").astype(bool)
    if pred.shape != labels.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match labels {labels.shape}")
    keep = ~excluded
    ok = (pred.astype(np.uint8) == labels) & keep
    scored = int(keep.sum())
    correct = int(ok.sum())
    per_obs = [
        float(ok[:, i].sum() / keep[:, i].sum()) if keep[:, i].any() else None
        for i in range(labels.shape[1])
    ]
    return LogicalAccuracy(
        accuracy=correct / scored if scored else float("nan"),
        scored=scored,
        correct=correct,
        per_observable=per_obs,
        shots_dropped=int((~keep.any(axis=1)).sum()),
    )


def binomial_interval(successes: int, trials: int, confidence: float = 0.95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    ci = stats.binomtest(int(successes), int(trials)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


# --------------------------------------------------------------------------
# loss identification


@dataclass
class LossMetrics:
    threshold: float
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int


def lost_truth(records) -> np.ndarray:
    """``(shots, d*d)`` booleans: qubit lost at any round."""
    mask = _field(records, "loss_mask_truth")  # (S, T, n_data)
    return mask.any(axis=1)


def _prf(pred: np.ndarray, truth: np.ndarray, threshold: float) -> LossMetrics:
    tp = int((pred & truth).sum())
    fp = int((pred & ~truth).sum())
    fn = int((~pred & truth).sum())
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return LossMetrics(float(threshold), precision, recall, f1, tp, fp, fn)


def loss_metrics(final_probs: np.ndarray, records, threshold: float = 0.5) -> LossMetrics:
    """Precision, recall, and F1 over all (shot, data qubit) pairs.

    ``final_probs`` is ``(shots, d*d)``, the round-T loss probability (or any
    score on the same scale as ``threshold``). Precision is 1 with no
    positive predictions; recall is 1 with no true losses.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    truth = lost_truth(records)
    probs = np.asarray(final_probs)
    if probs.shape != truth.shape:
        raise ValueError(f"probability shape {probs.shape} does not match truth {truth.shape}")
    return _prf(probs >= threshold, truth, threshold)


def final_verdict(probs: np.ndarray, use_max: bool = False) -> np.ndarray:
    """Collapse ``(..., d*d, T)`` probabilities to one value per qubit.

    Defaults to the last round; ``use_max`` takes the maximum over rounds.
    """
    p = np.asarray(probs)
    return p.max(axis=-1) if use_max else p[..., -1]


def threshold_sweep(final_probs: np.ndarray, records, grid: Sequence[float] = DEFAULT_GRID) -> list[LossMetrics]:
    grid = [float(t) for t in grid]
    if not grid:
        raise ValueError("threshold grid is empty")
    return [loss_metrics(final_probs, records, t) for t in grid]


def is_monotone(values: Sequence[float], increasing: bool, tol: float = 0.0) -> bool:
    """Monotone up to ties (and ``tol``)."""
    v = np.asarray(values, dtype=float)
    step = np.diff(v)
    return bool(np.all(step >= -tol) if increasing else np.all(step <= tol))


@dataclass
class MissAnalysis:
    events_by_round: list[int]
    fn_by_loss_round: list[int]
    miss_rate_by_round: list[float | None]  # None where no event had that onset


def miss_analysis(predicted, records) -> MissAnalysis:
    """False negatives grouped by the round in which the loss began.

    ``predicted`` is a final-verdict array ``(shots, d*d)`` or a mask
    ``(shots, d*d, T)`` whose last round is taken as the verdict.
    """
    mask = _field(records, "loss_mask_truth").astype(bool)  # (S, T, n_data)
    S, T, nd = mask.shape
    pred = np.asarray(predicted).astype(bool)
    if pred.shape == (S, nd, T):
        pred = pred[..., -1]
    if pred.shape != (S, nd):
        raise ValueError(f"prediction shape {pred.shape} does not align with the records")
    lost = mask.any(axis=1)
    onset = np.argmax(mask, axis=1)  # 0-based round of first loss
    events = np.zeros(T, dtype=np.int64)
    misses = np.zeros(T, dtype=np.int64)
    np.add.at(events, onset[lost], 1)
    np.add.at(misses, onset[lost & ~pred], 1)
    rate = [float(m / e) if e else None for m, e in zip(misses, events)]
    return MissAnalysis(events.tolist(), misses.tolist(), rate)


def miss_rate_monotone(rates: Sequence[float | None], tol: float = 0.0) -> bool:
    """Non-decreasing over the rounds that had events."""
    v = [r for r in rates if r is not None]
    return is_monotone(v, increasing=True, tol=tol)


# --------------------------------------------------------------------------
# latency


@dataclass
class LatencyStats:
    median_ms: float
    p25_ms: float
    p75_ms: float
    iqr_ms: float
    max_ms: float
    windows_measured: int
    warmup: int
    passes_per_window: float | None = None
    sequential_median_ms: float | None = None
    parallel_over_sequential: float | None = None
    scale: str = "relative"


def _timed(fn: Callable[[object], object], items: Sequence, warmup: int, repetitions: int) -> np.ndarray:
    for i in range(warmup):
        fn(items[i % len(items)])
    out = np.empty(repetitions)
    for i in range(repetitions):
        item = items[i % len(items)]
        t0 = time.perf_counter()
        fn(item)
        out[i] = (time.perf_counter() - t0) * 1e3
    return out


def latency_bench(
    decode: Callable[[object], object],
    windows: Sequence,
    repetitions: int = 100,
    warmup: int = 5,
    pass_counter: Callable[[], int] | None = None,
    sequential: Callable[[object], object] | None = None,
) -> LatencyStats:
    """Wall-clock time per full window, median and IQR after warm-up.

    ``pass_counter`` (if given) reports how many model passes have run so
    far; the ratio over the timed calls is recorded. ``sequential`` is an
    alternative decode of the same window, round by round, timed the same
    way for a relative comparison.
    """
    if len(windows) == 0:
        raise ValueError("no windows to benchmark")
    if repetitions < 1:
        raise ValueError("need at least one timed repetition after warm-up")
    if warmup < 0:
        raise ValueError("warm-up count must be non-negative")
    for i in range(warmup):
        decode(windows[i % len(windows)])
    before = pass_counter() if pass_counter else None
    times = _timed(decode, windows, 0, repetitions)
    passes = (pass_counter() - before) / repetitions if pass_counter else None
    p25, med, p75 = np.percentile(times, [25, 50, 75])
    result = LatencyStats(
        median_ms=float(med), p25_ms=float(p25), p75_ms=float(p75), iqr_ms=float(p75 - p25),
        max_ms=float(times.max()), windows_measured=repetitions, warmup=warmup,
        passes_per_window=passes,
    )
    if sequential is not None:
        seq = _timed(sequential, windows, warmup, repetitions)
        result.sequential_median_ms = float(np.median(seq))
        result.parallel_over_sequential = float(med / np.median(seq))
    return result


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    decoder: str
    logical_accuracy: float | None = None
    logical_scored: int | None = None
    per_T: dict = field(default_factory=dict)
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    threshold: float | None = None
    threshold_curve: list = field(default_factory=list)
    fn_by_loss_round: list = field(default_factory=list)
    miss_rate_by_round: list = field(default_factory=list)
    latency: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    dataset_hash: str | None = None

    def add_loss(self, final_probs: np.ndarray, records, threshold: float = 0.5, grid=DEFAULT_GRID) -> None:
        m = loss_metrics(final_probs, records, threshold)
        self.threshold = threshold
        self.precision, self.recall, self.f1 = m.precision, m.recall, m.f1
        self.threshold_curve = [
            {"threshold": s.threshold, "precision": s.precision, "recall": s.recall, "f1": s.f1}
            for s in threshold_sweep(final_probs, records, grid)
        ]
        miss = miss_analysis(np.asarray(final_probs) >= threshold, records)
        self.fn_by_loss_round = miss.fn_by_loss_round
        self.miss_rate_by_round = miss.miss_rate_by_round

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, allow_nan=False, default=_jsonable)


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
