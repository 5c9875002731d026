import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from denseground.errors import MissingRegime, NoPositives, ShapeMismatch
from denseground.evaluation import (
    EvalReport,
    act_dis,
    average_precision,
    evaluate,
    iou,
    miou_sweep,
    minmax_scale,
    pred_dis,
    prompted_heatmaps,
    prompted_segmentation_eval,
    retrieval_accuracy,
    threshold_grid,
)
from denseground.featurizers import ModelConfig, init_params
from denseground.similarity import read_pgm
from denseground.synth import REGIMES, Corpus, GeneratorConfig

from oracles import naive_average_precision, naive_rank

LANG, SOUND = REGIMES


@pytest.fixture(scope="module")
def eval_corpus():
    return Corpus.generate(GeneratorConfig(n_train=0, n_eval=400), 0, "eval")


# ---------------------------------------------------------------- AP and IoU


def test_ap_hand_example():
    ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 1])
    assert abs(ap - (1 + 2 / 3 + 3 / 4) / 3) < 1e-15
    assert abs(ap - 0.805556) < 1e-6


def test_ap_perfect_and_errors():
    assert average_precision([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    with pytest.raises(NoPositives):
        average_precision([1, 2], [0, 0])
    with pytest.raises(ShapeMismatch):
        average_precision([1, 2], [1])


def test_ap_ties_form_one_group():
    assert average_precision([1, 1, 1, 1], [1, 0, 0, 1]) == 0.5
    assert average_precision([2, 1, 1], [0, 1, 0]) == pytest.approx(1 / 3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=1, max_size=25))
def test_ap_matches_oracle_and_is_rank_only(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [int(b) for _, b in pairs]
    if not any(labels):
        labels[0] = 1
    ap = average_precision(scores, labels)
    assert ap == pytest.approx(naive_average_precision(scores, labels), abs=1e-12)
    for f in (lambda x: 2 * x + 7, lambda x: x ** 3, np.exp):
        assert average_precision(f(np.array(scores)), labels) == pytest.approx(ap, abs=1e-12)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert average_precision(np.array(scores)[perm], np.array(labels)[perm]) == pytest.approx(ap, abs=1e-12)


def test_iou_examples():
    assert iou([1, 1, 0], [1, 0, 1]) == 1 / 3
    assert iou([1, 0], [1, 0]) == 1.0 and iou([1, 0], [0, 1]) == 0.0
    assert iou([0, 0], [0, 0]) == 1.0 and iou([0, 1], [0, 0]) == 0.0
    with pytest.raises(ShapeMismatch):
        iou([1, 0], [1, 0, 0])


# ---------------------------------------------------------------- mIoU sweep


def test_threshold_grid_excludes_endpoints():
    grid = threshold_grid(0.0, 21.0)
    assert len(grid) == 20 and grid[0] == 1.0 and grid[-1] == 20.0


def test_sweep_perfect_heatmap():
    masks = [np.array([[1, 0], [0, 0]]), np.array([[0, 1], [1, 0]])]
    res = miou_sweep([m.astype(float) for m in masks], masks, [0, 1])
    assert res.miou == 1.0 and not res.degenerate and res.index == 0


def test_sweep_degenerate_constant():
    masks = [np.array([[1, 0], [0, 0]])]
    res = miou_sweep([np.full((2, 2), 0.3)], masks, [4])
    assert res.degenerate and res.index == -1 and res.miou == 0.25


def brute_force_sweep(heat, masks, ids):
    lo = min(h.min() for h in heat)
    hi = max(h.max() for h in heat)
    best = -1.0
    for i in range(1, 21):
        thr = lo + (hi - lo) * i / 21
        per_class = {}
        for h, m, c in zip(heat, masks, ids):
            pred = [[h[y][x] > thr for x in range(len(h[0]))] for y in range(len(h))]
            inter = sum(p and g for pr, gr in zip(pred, m) for p, g in zip(pr, gr))
            union = sum(p or g for pr, gr in zip(pred, m) for p, g in zip(pr, gr))
            per_class.setdefault(c, []).append(1.0 if union == 0 else inter / union)
        best = max(best, np.mean([np.mean(v) for v in per_class.values()]))
    return best


def test_sweep_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(10):
        heat = [rng.normal(size=(3, 3)) for _ in range(4)]
        masks = [rng.random((3, 3)) < 0.4 for _ in range(4)]
        ids = [0, 1, 0, 1]
        assert miou_sweep(heat, masks, ids).miou == pytest.approx(brute_force_sweep(heat, masks, ids), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_sweep_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    heat = [rng.normal(size=(4, 4)) for _ in range(3)]
    masks = [rng.random((4, 4)) < 0.3 for _ in range(3)]
    base = miou_sweep(heat, masks, [0, 1, 1])
    moved = miou_sweep([a * h + b for h in heat], masks, [0, 1, 1])
    assert moved.miou == pytest.approx(base.miou, abs=1e-9) and moved.index == base.index


# ---------------------------------------------------------------- retrieval


def test_retrieval_identity_and_constant():
    a2i, i2a = retrieval_accuracy(np.eye(20))
    assert a2i[1] == i2a[1] == 1.0
    n = 20
    a2i, i2a = retrieval_accuracy(np.zeros((n, n)))
    for k in (1, 5, 10):
        assert a2i[k] == i2a[k] == k / n


def test_retrieval_matches_rank_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = rng.integers(0, 3, size=(5, 5)).astype(float)
        a2i, i2a = retrieval_accuracy(m, ks=(1, 2, 3, 4, 5))
        for k in range(1, 6):
            assert a2i[k] == np.mean([naive_rank(list(m[i]), i) < k for i in range(5)])
            assert i2a[k] == np.mean([naive_rank(list(m[:, i]), i) < k for i in range(5)])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_retrieval_monotone_in_k(seed):
    m = np.random.default_rng(seed).normal(size=(12, 12))
    a2i, i2a = retrieval_accuracy(m, ks=range(1, 13))
    for acc in (a2i, i2a):
        values = [acc[k] for k in range(1, 13)]
        assert values == sorted(values) and values[-1] == 1.0


def test_retrieval_rejects_non_square():
    with pytest.raises(ShapeMismatch):
        retrieval_accuracy(np.zeros((3, 4)))


# ---------------------------------------------------------------- disentanglement


def test_minmax_examples():
    np.testing.assert_allclose(minmax_scale([1, 3, 5])[:, 0], [0, 0.5, 1])
    assert np.all(minmax_scale(np.full((4, 2), 7.0)) == 0.5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100), st.floats(-50, 50))
def test_minmax_affine_invariance(seed, a, b):
    x = np.random.default_rng(seed).normal(size=(6, 2))
    np.testing.assert_allclose(minmax_scale(a * x + b), minmax_scale(x), atol=1e-9)


def test_dis_perfect_separation():
    regimes = [SOUND, SOUND, LANG, LANG]
    scores = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]])
    assert pred_dis(minmax_scale(scores), regimes) == 1.0
    silent = np.array([[1.0, 0.0], [0.7, 0.0], [0.0, 1.0], [0.0, 0.4]])
    assert act_dis(silent, regimes) == 1.0


def test_dis_constant_cases():
    regimes = [SOUND, LANG, SOUND, LANG]
    assert pred_dis(minmax_scale(np.ones((4, 2))), regimes) == 0.5
    assert act_dis(np.full((4, 2), 0.5), regimes) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-3, 3))
def test_dis_head_permutation_and_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(10, 2))
    regimes = [LANG] * 5 + [SOUND] * 5
    pd, ad = pred_dis(minmax_scale(raw), regimes), act_dis(minmax_scale(raw), regimes)
    swapped = raw[:, ::-1]
    assert pred_dis(minmax_scale(swapped), regimes) == pytest.approx(pd, abs=1e-12)
    assert act_dis(minmax_scale(swapped), regimes) == pytest.approx(ad, abs=1e-12)
    moved = raw.copy()
    moved[:, 1] = a * moved[:, 1] + b
    assert pred_dis(minmax_scale(moved), regimes) == pytest.approx(pd, abs=1e-9)
    assert act_dis(minmax_scale(moved), regimes) == pytest.approx(ad, abs=1e-9)
    assert 0 <= pd <= 1 and 0 <= ad <= 1


def test_dis_needs_both_regimes():
    with pytest.raises(MissingRegime):
        pred_dis(np.zeros((3, 2)), [LANG] * 3)
    with pytest.raises(MissingRegime):
        act_dis(np.zeros((3, 2)), [SOUND] * 3)


# ---------------------------------------------------------------- model-level


def test_oracle_heatmaps_give_perfect_map(eval_corpus):
    params = init_params(ModelConfig(), 0)
    maps = prompted_heatmaps(params, eval_corpus, LANG)
    oracle = [(c, i, m.astype(float), m) for c, i, _, m in maps]
    res = prompted_segmentation_eval(params, eval_corpus, LANG, oracle)
    assert res["mAP"] == 1.0 and res["mIoU"] == 1.0
    assert res["mAP"] == np.mean(list(res["per_class_ap"].values()))


def test_prompted_heatmaps_cover_same_regime_objects(eval_corpus):
    params = init_params(ModelConfig(), 0)
    maps = prompted_heatmaps(params, eval_corpus, SOUND)
    expected = sum(len(s.objects) for s in eval_corpus.samples if s.regime == SOUND)
    assert len(maps) == expected
    assert all(h.shape == (64, 64) and m.shape == (64, 64) for _, _, h, m in maps)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_untrained_map_near_prevalence(eval_corpus, seed):
    params = init_params(ModelConfig(), seed)
    parts = [prompted_segmentation_eval(params, eval_corpus, r) for r in REGIMES]
    aps = [ap for p in parts for ap in p["per_class_ap"].values()]
    prevalence = np.mean([p["prevalence"] for p in parts])
    assert abs(np.mean(aps) - prevalence) <= 0.05


def test_report_files(tmp_path):
    corpus = Corpus.generate(GeneratorConfig(n_train=0, n_eval=24), 1, "eval")
    params = init_params(ModelConfig(), 1)
    report = evaluate(params, corpus, n_retrieval=20, checkpoint="abc", heatmap_dir=tmp_path / "maps",
                      meta={"when": "now"})
    report.write(tmp_path)
    data = json.loads((tmp_path / "report.json").read_text())
    assert set(data) == {"speech", "sound", "mAP", "retrieval", "PredDis", "ActDis", "config", "checkpoint", "meta"}
    rows = (tmp_path / "report.csv").read_text().splitlines()
    assert rows[0] == "metric,name,value" and len(rows) == len(report.metrics()) + 1
    for _, name, value in report.metrics():
        assert 0 <= value <= 1 or name in ("mIoU_threshold", "mIoU_threshold_index")
    pgms = sorted((tmp_path / "maps").glob("*.pgm"))
    assert len(pgms) == sum(len(s.objects) for s in corpus.samples)
    assert read_pgm(pgms[0]).shape == (64, 64)
    assert all(p.with_name(p.name + ".json").exists() for p in pgms)
    assert not math.isnan(report.PredDis)
    assert EvalReport(**data).mAP == report.mAP
