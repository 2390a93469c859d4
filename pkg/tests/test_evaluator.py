import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import feature_corpus
from speechmlc.corpus import LabelVector, ManifestEntry, parse_manifest, write_manifest
from speechmlc.errors import DataError, UndefinedRatioError
from speechmlc.evaluator import (
    ConfusionCounts, binarize, build_report, confusion_counts, detection_probability, evaluate, f1,
    macro_f1, stratified_f1,
)
from speechmlc.model import ModelConfig, init_parameters, save_checkpoint


def brute_f1(pred, target):
    tp = sum(1 for p, t in zip(pred, target) if p and t)
    fp = sum(1 for p, t in zip(pred, target) if p and not t)
    fn = sum(1 for p, t in zip(pred, target) if not p and t)
    if tp + fp == 0 or tp + fn == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


# -- binarize -------------------------------------------------------------------------


def test_binarize_boundary_inclusive():
    assert binarize(np.array([0.5, 0.4999, 0.5001])).tolist() == [1, 0, 1]


def test_binarize_idempotent_on_binary():
    x = np.array([[0, 1], [1, 0]])
    assert np.array_equal(binarize(x), x)
    assert np.array_equal(binarize(binarize(np.array([0.2, 0.7]))), binarize(np.array([0.2, 0.7])))


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_binarize_threshold_range(tau):
    with pytest.raises(ValueError):
        binarize(np.array([0.3]), tau)


# -- f1 and macro ---------------------------------------------------------------------


def test_f1_perfect():
    assert f1(ConfusionCounts(tp=5, tn=3)) == 1.0


def test_f1_no_true_positives():
    assert f1(ConfusionCounts(tp=0, fp=3, fn=2)) == 0.0
    assert f1(ConfusionCounts()) == 0.0


def test_f1_hand_computed():
    assert f1(ConfusionCounts(tp=2, fp=1, fn=1)) == pytest.approx(2 * (2 / 3) * (2 / 3) / (4 / 3))
    assert round(f1(ConfusionCounts(tp=2, fp=1, fn=1)), 4) == 0.6667


@settings(max_examples=100)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(0, 20), st.integers(1, 9))
def test_f1_scale_invariant(tp, fp, fn, tn, m):
    a = f1(ConfusionCounts(tp, fp, fn, tn))
    b = f1(ConfusionCounts(m * tp, m * fp, m * fn, m * tn))
    assert a == pytest.approx(b, abs=1e-12)


def test_macro_constant_and_single():
    assert macro_f1([1.0] * 8) == 1.0
    assert macro_f1([0.42]) == 0.42


def test_macro_of_reported_row():
    row = [0.930, 0.995, 0.903, 0.906, 0.916, 0.856, 0.669, 0.537]
    assert round(macro_f1(row), 3) == 0.839


def test_macro_empty():
    with pytest.raises(ValueError):
        macro_f1([])


# -- detection ----------------------------------------------------------------------------


def test_detection_saturates():
    assert detection_probability(np.full(7, 0.9)) == 1.0


def test_detection_zero():
    assert detection_probability(np.full(7, 0.1)) == 0.0


def test_detection_counts():
    p = np.array([0.9, 0.6, 0.5, 0.1, 0.2, 0.3, 0.0, 0.49, 0.4, 0.05])
    assert detection_probability(p) == 0.3


def test_detection_empty():
    with pytest.raises(UndefinedRatioError):
        detection_probability(np.array([]))


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_detection_monotone_in_threshold(ps, tau, step):
    hi = min(tau + step, 0.99)
    assert detection_probability(np.array(ps), hi) <= detection_probability(np.array(ps), tau)


# -- strata -------------------------------------------------------------------------------


def test_strata_all_high():
    rng = np.random.default_rng(0)
    targets = rng.integers(0, 2, (20, 8))
    probs = rng.uniform(size=(20, 8))
    low, high = stratified_f1(np.full((20, 8), 8), targets, probs)
    assert low == [None] * 8
    counts = confusion_counts(binarize(probs), targets)
    assert [h.counts for h in high] == counts


def test_five_votes_is_high():
    low, high = stratified_f1(np.array([[5]]), np.array([[1]]), np.array([[0.9]]))
    assert low[0] is None and high[0].n == 1
    low, high = stratified_f1(np.array([[4]]), np.array([[1]]), np.array([[0.9]]))
    assert high[0] is None and low[0].n == 1


def test_strata_partition_counts():
    rng = np.random.default_rng(1)
    votes = rng.integers(0, 9, (50, 8))
    targets = rng.integers(0, 2, (50, 8))
    probs = rng.uniform(size=(50, 8))
    low, high = stratified_f1(votes, targets, probs)
    total = confusion_counts(binarize(probs), targets)
    for k in range(8):
        parts = [r.counts for r in (low[k], high[k]) if r is not None]
        assert sum(parts, ConfusionCounts()) == total[k]


@settings(max_examples=50)
@given(st.integers(1, 30), st.integers(1, 5), st.integers(0, 2 ** 31 - 1))
def test_pooled_counts_equal_part_sums(n, cut_count, seed):
    rng = np.random.default_rng(seed)
    preds = rng.integers(0, 2, (n, 3))
    targets = rng.integers(0, 2, (n, 3))
    cuts = sorted(rng.integers(0, n + 1, cut_count))
    bounds = [0, *cuts, n]
    parts = [confusion_counts(preds[a:b], targets[a:b]) for a, b in zip(bounds, bounds[1:]) if b > a]
    pooled = confusion_counts(preds, targets)
    for k in range(3):
        assert sum((p[k] for p in parts), ConfusionCounts()) == pooled[k]


def test_metrics_agree_with_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        probs = rng.uniform(size=(n, 3)).round(1)
        targets = rng.integers(0, 2, (n, 3))
        votes = rng.integers(0, 9, (n, 3))
        preds = binarize(probs)
        counts = confusion_counts(preds, targets)
        for k in range(3):
            assert f1(counts[k]) == pytest.approx(brute_f1(preds[:, k], targets[:, k]), abs=1e-12)
            assert detection_probability(probs[:, k]) == sum(p >= 0.5 for p in probs[:, k]) / n
        low, high = stratified_f1(votes, targets, probs)
        for k in range(3):
            for stratum, keep in ((low, lambda v: v < 5), (high, lambda v: v >= 5)):
                idx = [i for i in range(n) if keep(votes[i, k])]
                if not idx:
                    assert stratum[k] is None
                else:
                    assert stratum[k].f1 == pytest.approx(brute_f1(preds[idx, k], targets[idx, k]), abs=1e-12)


def test_report_scores_in_unit_interval():
    rng = np.random.default_rng(3)
    r = build_report(rng.integers(0, 2, (30, 8)), rng.uniform(size=(30, 8)), rng.integers(0, 9, (30, 8)))
    d = r.to_dict()
    assert len(d["per_label"]) == 8
    for block in d["per_label"]:
        assert 0 <= block["f1"] <= 1 and block["tp"] + block["fp"] + block["fn"] + block["tn"] == 30
    assert 0 <= d["macro_f1"] <= 1


# -- evaluate -----------------------------------------------------------------------------


def _zero_head_checkpoint(path, cfg):
    p = init_parameters(cfg, 0)
    p["heads.weight"][:] = 0
    p["heads.bias"][:] = 0
    save_checkpoint(p, cfg, path)
    return path


def test_zeroed_heads_closed_form(tmp_path):
    manifest, entries = feature_corpus(tmp_path, n_train=0, n_eval=30, seed=5)
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=6, target_frames=12)
    ckpt = _zero_head_checkpoint(tmp_path / "z.ckpt", cfg)
    report = evaluate(ckpt, manifest)
    targets = np.array([e.label.labels for e in entries])
    for k in range(8):
        prev = targets[:, k].mean()
        assert report.f1[k] == pytest.approx(2 * prev / (1 + prev), abs=1e-12)
        assert report.f1[k] == pytest.approx(brute_f1([1] * 30, targets[:, k]), abs=1e-12)
        assert report.detection[report.labels[k]] == 1.0


def test_evaluate_deterministic(tmp_path):
    manifest, _ = feature_corpus(tmp_path, n_train=0, n_eval=10, seed=6)
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=6, target_frames=12)
    save_checkpoint(init_parameters(cfg, 3), cfg, tmp_path / "m.ckpt")
    a = evaluate(tmp_path / "m.ckpt", manifest, report_path=tmp_path / "a.json")
    b = evaluate(tmp_path / "m.ckpt", manifest, report_path=tmp_path / "b.json", workers=3, batch_size=3)
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()
    d = json.loads((tmp_path / "a.json").read_text())
    assert d["config"]["threshold"] == 0.5 and len(d["config"]["checkpoint_id"]) == 16
    assert a.f1 == b.f1


def test_single_sample_macro_over_present_labels(tmp_path):
    lv = LabelVector.from_names(("Female", "Adult", "Bright", "Smooth"))
    feature_corpus(tmp_path, n_train=0, n_eval=1)
    entry = parse_manifest(tmp_path / "manifest.tsv")[0]
    write_manifest(tmp_path / "one.tsv", [ManifestEntry(entry.id, entry.source, lv, "s", "eval")])
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=6, target_frames=12)
    p = init_parameters(cfg, 0)
    p["heads.weight"][:] = 0
    p["heads.bias"][:] = np.where(np.array(lv.labels) == 1, 5.0, -5.0)
    save_checkpoint(p, cfg, tmp_path / "c.ckpt")
    report = evaluate(tmp_path / "c.ckpt", tmp_path / "one.tsv")
    assert [report.f1[k] for k in range(8)] == [1.0, 0, 1.0, 0, 0, 1.0, 0, 1.0]
    assert report.macro_f1 == 1.0


def test_evaluate_empty_eval_split(tmp_path):
    manifest, _ = feature_corpus(tmp_path, n_train=3, n_eval=0)
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=6, target_frames=12)
    save_checkpoint(init_parameters(cfg, 0), cfg, tmp_path / "m.ckpt")
    with pytest.raises(DataError):
        evaluate(tmp_path / "m.ckpt", manifest)


def test_evaluate_dimension_mismatch_names_entry(tmp_path):
    manifest, entries = feature_corpus(tmp_path, n_train=0, n_eval=2)
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=7, target_frames=12)
    save_checkpoint(init_parameters(cfg, 0), cfg, tmp_path / "m.ckpt")
    with pytest.raises(DataError, match=entries[0].id):
        evaluate(tmp_path / "m.ckpt", manifest)


def test_detect_only(tmp_path):
    manifest, _ = feature_corpus(tmp_path, n_train=0, n_eval=5)
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, input_dim=6, target_frames=12)
    ckpt = _zero_head_checkpoint(tmp_path / "z.ckpt", cfg)
    report = evaluate(ckpt, manifest, detect_only=[4, 5])
    assert report.detection == {"Dark": 1.0, "Bright": 1.0}
    assert report.macro_f1 is None and report.to_dict()["per_label"] == []
