import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_cider, exhaustive_order_preserving
from streamcap.codec import Event
from streamcap.metrics import (
    MetricsReport,
    caption_statistics,
    cider_d,
    corpus_f1,
    evaluate,
    f1_localization,
    greedy_match,
    iou_matrix,
    optimal_match_count,
    order_preserving_max,
    soda_style,
    temporal_iou,
    token_f1,
)
from streamcap.synth import read_dataset

FIXTURE = Path(__file__).parent / "fixtures" / "vitt_like_gt.jsonl"


def E(a, b, c="x"):
    return Event(float(a), float(b), c)


def test_iou_values():
    assert temporal_iou(E(0, 10), E(5, 15)) == pytest.approx(5 / 15)
    assert temporal_iou(E(0, 1), E(2, 3)) == 0.0
    assert temporal_iou(E(2, 2), E(2, 2)) == 0.0
    assert temporal_iou(E(0, 4), E(1, 3)) == 0.5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=4, max_size=4))
def test_iou_symmetric_and_bounded(xs):
    a, b = E(*sorted(xs[:2])), E(*sorted(xs[2:]))
    v = temporal_iou(a, b)
    assert 0.0 <= v <= 1.0 and v == temporal_iou(b, a)


def test_f1_identity_and_empty():
    gt = [E(0, 5), E(6, 9)]
    assert f1_localization(gt, gt)["mean_f1"] == 1.0
    assert f1_localization([], gt)["mean_f1"] == 0.0
    assert f1_localization([], [])["mean_f1"] == 1.0


def test_f1_thresholds():
    r = f1_localization([E(0, 10)], [E(0, 8)])  # IoU 0.8
    assert [v["f1"] for v in r["per_threshold"].values()] == [1, 1, 1, 0]
    assert r["mean_f1"] == 0.75


def test_greedy_is_one_to_one():
    ious = iou_matrix([E(0, 10), E(0, 9)], [E(0, 10)])
    assert greedy_match(ious, 0.5) == [(0, 0)]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_greedy_never_beats_optimal(seed):
    rng = np.random.default_rng(seed)
    ious = rng.uniform(size=(rng.integers(1, 5), rng.integers(1, 5)))
    assert len(greedy_match(ious, 0.5)) <= optimal_match_count(ious, 0.5)


def test_corpus_f1_averages_precision_and_recall():
    preds = {"a": [E(0, 1)], "b": [E(0, 1), E(5, 6)]}
    gts = {"a": [E(0, 1)], "b": [E(0, 1)]}
    r = corpus_f1(preds, gts, thresholds=(0.5,))
    p, rec = (1 + 0.5) / 2, 1.0
    assert r["per_threshold"][0.5]["f1"] == pytest.approx(2 * p * rec / (p + rec))


def test_cider_hand_computed():
    refs = {"v1": ["a b"], "v2": ["c d"]}
    preds = {"v1": "a b", "v2": "c e"}
    # v1: unigram and bigram cosines are 1, tri/4-grams empty -> 10 * 2/4 = 5
    # v2: unigram cosine 1/2, rest 0 -> 10 * 0.5/4 = 1.25
    assert cider_d(preds, refs) == pytest.approx((5 + 1.25) / 2, abs=1e-12)


def test_cider_length_penalty():
    refs = {"v1": ["a b c d e f g h"], "v2": ["z"]}
    short = cider_d({"v1": "a b", "v2": "z"}, refs)
    full = cider_d({"v1": "a b c d e f g h", "v2": "z"}, refs)
    assert short < full


@pytest.mark.parametrize("seed", range(30))
def test_cider_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    words = list("abcdef")

    def sent():
        return " ".join(rng.choice(words, size=rng.integers(1, 9)))

    keys = [f"v{i}" for i in range(rng.integers(2, 5))]
    refs = {k: [sent() for _ in range(rng.integers(1, 3))] for k in keys}
    preds = {k: sent() for k in keys}
    assert abs(cider_d(preds, refs) - brute_cider(preds, refs)) <= 1e-6


def test_token_f1():
    assert token_f1("a b c", "a b c") == 1.0
    assert token_f1("a b", "c d") == 0.0
    assert token_f1("a b", "a c") == pytest.approx(0.5)


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 10**6))
def test_order_preserving_dp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(size=(rng.integers(1, 6), rng.integers(1, 6))) * (rng.uniform(size=1) > 0.2)
    assert order_preserving_max(sim) == pytest.approx(exhaustive_order_preserving(sim), abs=1e-12)


def test_soda_identity_and_empty():
    gt = [E(0, 4, "cut bread"), E(5, 9, "pour water")]
    assert soda_style(gt, gt) == 1.0
    assert soda_style([], gt) == 0.0
    crossed = [E(5, 9, "cut bread"), E(0, 4, "pour water")]
    assert soda_style(crossed, gt) == 0.0


def test_fixture_statistics_exact():
    gts = {x.id: x.events for x in read_dataset(FIXTURE)}
    assert caption_statistics(gts) == (7.1, 22.0)


def test_evaluate_report_serializes():
    gt = {"a": [E(0, 4, "cut bread")], "b": [E(1, 3, "pour water")]}
    rep = evaluate(gt, gt, dropped=3)
    d = rep.to_dict()
    assert d["mean_f1"] == 1.0 and d["soda"] == 1.0 and d["dropped_parse_count"] == 3
    assert set(d["f1_per_threshold"]) == {"0.3", "0.5", "0.7", "0.9"}
    json.dumps(d)
    assert rep.tsv_header().count("\t") == rep.tsv_row().count("\t")


def test_evaluate_empty_predictions():
    gt = {"a": [E(0, 4, "cut bread")]}
    rep = evaluate({}, gt)
    assert rep.mean_f1 == 0.0 and rep.soda == 0.0 and rep.cider == 0.0
    assert isinstance(rep, MetricsReport)
