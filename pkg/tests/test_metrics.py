from __future__ import annotations

import json
import math
from types import SimpleNamespace

import numpy as np
import pytest

from qlossbench.metrics import (
    EvalReport, binomial_interval, final_verdict, is_monotone, latency_bench, logical_accuracy,
    loss_metrics, miss_analysis, miss_rate_monotone, threshold_sweep,
)


def _shot(labels, excluded, mask):
    return SimpleNamespace(
        logical_labels=np.array(labels, np.uint8),
        excluded_observables=np.array(excluded, np.uint8),
        loss_mask_truth=np.array(mask, np.uint8),
    )


def test_accuracy_skips_excluded_observables():
    recs = [_shot([0, 1, 0], [0, 1, 0], np.zeros((2, 9))), _shot([1, 1, 1], [1, 1, 1], np.zeros((2, 9)))]
    pred = np.array([[0, 0, 1], [0, 0, 0]])
    acc = logical_accuracy(pred, recs)
    assert acc.scored == 2 and acc.correct == 1 and acc.accuracy == 0.5
    assert acc.shots_dropped == 1
    assert acc.per_observable == [1.0, None, 0.0]


def test_accuracy_all_excluded_is_nan():
    recs = [_shot([0], [1], np.zeros((1, 1)))]
    assert math.isnan(logical_accuracy(np.zeros((1, 1)), recs).accuracy)
    with pytest.raises(ValueError):
        logical_accuracy(np.zeros((1, 2)), recs)


def test_two_of_three_overlap_case():
    # truth {a, b}, prediction {a, c}
    mask = np.zeros((1, 4))
    mask[0, [0, 1]] = 1
    recs = [_shot([0], [0], mask)]
    probs = np.array([[0.9, 0.1, 0.9, 0.0]])
    m = loss_metrics(probs, recs, 0.5)
    assert (m.precision, m.recall, m.f1) == (0.5, 0.5, 0.5)
    assert (m.tp, m.fp, m.fn) == (1, 1, 1)


def test_degenerate_precision_recall():
    recs = [_shot([0], [0], np.zeros((1, 4)))]
    m = loss_metrics(np.zeros((1, 4)), recs, 0.5)
    assert m.precision == 1.0 and m.recall == 1.0
    with pytest.raises(ValueError):
        loss_metrics(np.zeros((1, 4)), recs, 2.0)
    with pytest.raises(ValueError):
        loss_metrics(np.zeros((1, 3)), recs, 0.5)


def test_sweep_and_monotone():
    rng = np.random.default_rng(0)
    masks = (rng.random((200, 3, 4)) < 0.2).astype(np.uint8)
    masks = np.maximum.accumulate(masks, axis=1)
    recs = [_shot([0], [0], m) for m in masks]
    probs = np.clip(masks[:, -1] * 0.6 + rng.random((200, 4)) * 0.5, 0, 1)
    sweep = threshold_sweep(probs, recs)
    assert len(sweep) == 21 and sweep[0].threshold == 0.0 and sweep[-1].threshold == 1.0
    assert is_monotone([s.recall for s in sweep], increasing=False)
    assert sweep[0].recall == 1.0
    assert is_monotone([1, 1, 2], True) and not is_monotone([2, 1], True)
    assert is_monotone([1.0, 0.999], True, tol=0.01)


def test_final_verdict():
    p = np.array([[[0.1, 0.7, 0.3]]])
    assert final_verdict(p)[0, 0] == 0.3
    assert final_verdict(p, use_max=True)[0, 0] == 0.7


def test_miss_analysis_groups_by_onset():
    T = 3
    m1 = np.zeros((T, 2)); m1[0:, 0] = 1  # onset round 1
    m2 = np.zeros((T, 2)); m2[2:, 1] = 1  # onset round 3
    m3 = np.zeros((T, 2)); m3[2:, 0] = 1  # onset round 3
    recs = [_shot([0], [0], m) for m in (m1, m2, m3)]
    pred = np.array([[1, 0], [0, 0], [0, 0]], bool)
    ma = miss_analysis(pred, recs)
    assert ma.events_by_round == [1, 0, 2]
    assert ma.fn_by_loss_round == [0, 0, 2]
    assert ma.miss_rate_by_round == [0.0, None, 1.0]
    assert miss_rate_monotone(ma.miss_rate_by_round)
    assert not miss_rate_monotone([0.5, None, 0.1])
    with pytest.raises(ValueError):
        miss_analysis(np.zeros((3, 5)), recs)


def test_binomial_interval():
    lo, hi = binomial_interval(50, 100)
    assert lo < 0.5 < hi
    assert binomial_interval(0, 10)[0] == 0.0


def test_latency_bench_counts_passes():
    calls = {"n": 0}

    def decode(w):
        calls["n"] += 1

    st = latency_bench(decode, [1, 2, 3], repetitions=120, warmup=4, pass_counter=lambda: calls["n"],
                       sequential=lambda w: None)
    assert st.windows_measured == 120 and st.passes_per_window == 1.0
    assert st.p25_ms <= st.median_ms <= st.p75_ms
    assert st.iqr_ms == pytest.approx(st.p75_ms - st.p25_ms)
    assert st.sequential_median_ms is not None
    with pytest.raises(ValueError):
        latency_bench(decode, [], 10)
    with pytest.raises(ValueError):
        latency_bench(decode, [1], 0)


def test_report_json():
    mask = np.zeros((2, 4)); mask[1, 2] = 1
    recs = [_shot([0], [0], mask)]
    r = EvalReport(decoder="flicker")
    r.add_loss(np.array([[0.0, 0.0, 0.8, 0.0]]), recs, 0.5)
    out = json.loads(r.to_json())
    assert out["precision"] == 1.0 and out["recall"] == 1.0
    assert len(out["threshold_curve"]) == 21
    assert out["miss_rate_by_round"] == [None, 0.0]
    r.logical_accuracy = float("nan")
    with pytest.raises(ValueError):
        r.to_json()
