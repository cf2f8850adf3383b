import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msfusion import classifiers as clf
from msfusion import evaluation as ev

FAST_GRID = dict(C_grid=(0.1, 10.0), gamma_grid=(0.01, 0.1))


def cohort(n_pos, n_neg, seed=0, severity=True):
    rng = np.random.default_rng(seed)
    entries = [ev.CohortEntry(f"P{i:03d}", "u0", "patient", float(rng.uniform(20, 52)) if severity else None)
               for i in range(n_pos)]
    entries += [ev.CohortEntry(f"C{i:03d}", "u0", "control", float(rng.uniform(0, 15)) if severity else None)
                for i in range(n_neg)]
    return ev.Cohort(entries)


def features_for(c, fn, segments=2, seed=0):
    """One row per segment; ``fn(label, rng)`` gives the feature vector."""
    rng = np.random.default_rng(seed)
    labels = c.label_of()
    spk, utt, rows = [], [], []
    for s in c.speakers:
        for j in range(segments):
            spk.append(s)
            utt.append("u0")
            rows.append(fn(labels[s], rng))
    return ev.SegmentFeatures(spk, utt, {"narrowband": np.array(rows)})


# --- cohort and folds -----------------------------------------------------------

def test_cohort_validation():
    with pytest.raises(ValueError, match="label"):
        ev.Cohort([ev.CohortEntry("a", "u", "sick")])
    with pytest.raises(ValueError, match="outside"):
        ev.Cohort([ev.CohortEntry("a", "u", "patient", 53.0)])
    with pytest.raises(ValueError, match="more than one label"):
        ev.Cohort([ev.CohortEntry("a", "u", "patient"), ev.CohortEntry("a", "v", "control")])


def test_fold_plan_pc_gita_sizes():
    c = cohort(50, 50)
    plan = ev.make_fold_plan(c, seed=3)
    labels = c.label_of()
    for fold in plan.outer:
        assert sum(labels[s] == 1 for s in fold) == 5 and sum(labels[s] == -1 for s in fold) == 5
    assert ev.make_fold_plan(c, seed=3) == plan


@pytest.mark.parametrize("seed", range(20))
def test_fold_plan_invariants(seed):
    rng = np.random.default_rng(seed)
    c = cohort(int(rng.integers(10, 40)), int(rng.integers(10, 40)), seed)
    plan = ev.make_fold_plan(c, seed=seed)
    labels = c.label_of()
    flat = [s for f in plan.outer for s in f]
    assert sorted(flat) == c.speakers and len(flat) == len(set(flat))
    for k, fold in enumerate(plan.outer):
        assert {labels[s] for s in fold} == {1, -1}
        inner = [s for f in plan.inner[k] for s in f]
        assert not set(inner) & set(fold)
        assert sorted(inner) == plan.train_speakers(k)
        n_pos = sum(labels[s] == 1 for s in c.speakers)
        assert abs(sum(labels[s] == 1 for s in fold) - n_pos / 10) < 1 + 1e-9
        for f in plan.inner[k]:
            assert {labels[s] for s in f} == {1, -1}


def test_fold_plan_needs_ten_per_class():
    with pytest.raises(ValueError, match="at least 10"):
        ev.make_fold_plan(cohort(9, 20))


def test_fold_plan_validate_catches_overlap():
    plan = ev.make_fold_plan(cohort(10, 10))
    bad = ev.FoldPlan([list(f) for f in plan.outer], [[list(x) for x in i] for i in plan.inner])
    bad.inner[0][0].append(plan.outer[0][0])
    with pytest.raises(ev.LeakageError):
        bad.validate()


# --- aggregation and metrics ----------------------------------------------------

def test_aggregate_examples():
    assert ev.aggregate_per_speaker(["a"], [0.7]) == {"a": 0.7}
    agg = ev.aggregate_per_speaker(["a", "a"], [1.0, -1.0])
    assert agg == {"a": 0.0} and clf.predict_labels(agg["a"]) == -1
    assert ev.aggregate_per_speaker(["a"] * 3, [0.2, 0.4, 0.9])["a"] == pytest.approx(0.5, abs=1e-15)
    per_utt = ev.aggregate_per_speaker(["a"] * 3, [0.0, 0.0, 1.0], ["u", "u", "v"])
    assert per_utt["a"] == 0.5
    with pytest.raises(ValueError):
        ev.aggregate_per_speaker(["a"], [1.0, 2.0])


def test_spearman_examples():
    assert ev.spearman_rho([1, 2, 3], [1, 2, 3]) == pytest.approx(1.0)
    assert ev.spearman_rho([1, 2, 3], [3, 1, 2]) == pytest.approx(-0.5, abs=1e-15)
    x = np.linspace(-2, 2, 9)
    assert ev.spearman_rho(x, np.exp(x)) == pytest.approx(1.0)
    with pytest.raises(ev.SpearmanUndefinedError):
        ev.spearman_rho([1, 1, 1], [1, 2, 3])
    with pytest.raises(ValueError):
        ev.spearman_rho([1, 2], [1, 2])


def test_spearman_matches_rank_difference_formula(rng):
    for _ in range(100):
        n = int(rng.integers(3, 40))
        x, y = rng.permutation(n).astype(float) + 0.5, rng.standard_normal(n)
        d = np.argsort(np.argsort(x)) - np.argsort(np.argsort(y))
        ref = 1 - 6 * np.sum(d * d) / (n * (n * n - 1))
        assert abs(ev.spearman_rho(x, y) - ref) < 1e-12


def test_spearman_average_ties():
    # oracle: ranks [1.5, 1.5, 3] vs [1, 2, 3], Pearson by hand
    rx, ry = np.array([1.5, 1.5, 3.0]), np.array([1.0, 2.0, 3.0])
    ref = np.corrcoef(rx, ry)[0, 1]
    assert ev.spearman_rho([5, 5, 9], [1, 2, 3]) == pytest.approx(ref, abs=1e-15)


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=30, unique=True), st.integers(0, 2**31 - 1))
def test_spearman_monotone_invariance(xs, seed):
    rng = np.random.default_rng(seed)
    x = np.array(xs)
    y = rng.standard_normal(len(x))
    rho = ev.spearman_rho(x, y)
    maps = [np.tanh, np.arctan, lambda v: v ** 3, lambda v: 2 * v + 5, lambda v: np.exp(v / 50)]
    for f in maps:
        fx = f(x)
        if len(np.unique(fx)) < len(fx):
            continue  # the map collapsed two points in floating point
        assert ev.spearman_rho(fx, y) == pytest.approx(rho, abs=1e-12)
        assert ev.spearman_rho(x, f(y / 10)) == pytest.approx(rho, abs=1e-12)


def test_auc_example():
    assert ev.auc_score([0.9, 0.4, 0.6, 0.1], [1, 1, -1, -1]) == 0.75
    assert ev.auc_score([1, 1], [1, -1]) == 0.5
    with pytest.raises(ValueError):
        ev.auc_score([0.1, 0.2], [1, 1])


def _brute_auc(s, y):
    pos, neg = s[y == 1], s[y == -1]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def test_auc_matches_pair_enumeration(rng):
    for _ in range(100):
        n = int(rng.integers(2, 30))
        y = np.where(rng.random(n) < 0.5, 1, -1)
        y[:2] = [1, -1]
        s = np.round(rng.standard_normal(n), 1)  # ties on purpose
        assert ev.auc_score(s, y) == _brute_auc(s, y)


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40, unique=True), st.integers(0, 2**31 - 1))
def test_auc_complement(scores, seed):
    s = np.array(scores)
    y = np.where(np.random.default_rng(seed).random(len(s)) < 0.5, 1, -1)
    y[:2] = [1, -1]
    assert ev.auc_score(s, y) + ev.auc_score(-s, y) == pytest.approx(1.0, abs=1e-12)


def test_metrics_match_brute_force(rng):
    for _ in range(50):
        n = int(rng.integers(2, 25))
        y = np.where(rng.random(n) < 0.5, 1, -1)
        y[:2] = [1, -1]
        p = np.where(rng.random(n) < 0.5, 1, -1)
        m = ev.compute_metrics(rng.standard_normal(n), p, y)
        tp, tn = np.sum((p == 1) & (y == 1)), np.sum((p == -1) & (y == -1))
        fp, fn = np.sum((p == 1) & (y == -1)), np.sum((p == -1) & (y == 1))
        prec = [tp / (tp + fp) if tp + fp else 0.0, tn / (tn + fn) if tn + fn else 0.0]
        rec = [tp / (tp + fn), tn / (tn + fp)]
        assert m.accuracy == (tp + tn) / n
        assert m.precision == pytest.approx(np.mean(prec), abs=1e-15)
        assert m.recall == pytest.approx(np.mean(rec), abs=1e-15)
        for v in (m.accuracy, m.precision, m.recall, m.auc):
            assert 0.0 <= v <= 1.0


def test_perfect_and_inverted_metrics():
    y = np.array([1, 1, -1, -1])
    s = np.array([2.0, 1.0, -1.0, -2.0])
    m = ev.compute_metrics(s, clf.predict_labels(s), y)
    assert (m.accuracy, m.precision, m.recall, m.auc) == (1.0, 1.0, 1.0, 1.0)
    assert ev.compute_metrics(-s, clf.predict_labels(-s), y).auc == 0.0
    assert ev.compute_metrics(s[:2], [1, 1], y[:2]).auc is None


# --- nested CV ------------------------------------------------------------------

def test_label_features_give_perfect_accuracy():
    c = cohort(10, 10)
    f = features_for(c, lambda lab, rng: np.array([float(lab), 0.0]))
    rep = ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID))
    assert rep.mean["accuracy"] == 1.0
    assert rep.rho is not None and -1 <= rep.rho <= 1
    assert len(rep.speakers) == 20 and {r["fold"] for r in rep.speakers} == set(range(10))


def shuffled(c, seed):
    labels = [e.label for e in c.entries]
    perm = np.random.default_rng(seed).permutation(len(labels))
    return ev.Cohort([ev.CohortEntry(e.speaker_id, e.utterance_id, labels[i], e.severity)
                      for e, i in zip(c.entries, perm)])


def test_shuffled_labels_sit_near_chance():
    c = cohort(50, 50, seed=4)
    # features carry the true label; the cohort handed to CV carries permuted ones
    f = features_for(c, lambda lab, rng: np.r_[lab, rng.standard_normal(3)], segments=1, seed=5)
    truth = ev.run_nested_cv(f, c, ev.CVConfig(seed=6, **FAST_GRID))
    assert truth.mean["accuracy"] == 1.0
    rep = ev.run_nested_cv(f, shuffled(c, 7), ev.CVConfig(seed=6, **FAST_GRID))
    assert 0.35 <= rep.mean["accuracy"] <= 0.65


def test_outer_test_speakers_never_reach_training():
    c = cohort(10, 10, seed=1)
    f = features_for(c, lambda lab, rng: lab + rng.standard_normal(3), seed=2)
    plan = ev.make_fold_plan(c, seed=0)
    audit = ev.LeakageAudit()
    base = ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID), plan=plan, audit=audit)
    assert audit.check(plan)
    assert {"fused:scaler+grid", "fused:final", "calibration"} <= audit.stages()
    # scrambling fold 0's test features cannot move anything fitted for fold 0
    k = 0
    rows = f.rows_for(plan.outer[k])
    scrambled = f.streams["narrowband"].copy()
    scrambled[rows] = 1e3 * np.random.default_rng(9).standard_normal(scrambled[rows].shape) + 500
    f2 = ev.SegmentFeatures(f.speaker_ids, f.utterance_ids, {"narrowband": scrambled})
    other = ev.run_nested_cv(f2, c, ev.CVConfig(**FAST_GRID), plan=plan)
    assert other.folds[k].params == base.folds[k].params
    assert any(other.folds[j].params != base.folds[j].params for j in range(1, 10))


def test_audit_flags_leak():
    plan = ev.make_fold_plan(cohort(10, 10))
    audit = ev.LeakageAudit()
    audit.record(3, "scaler", plan.train_speakers(3) + [plan.outer[3][0]])
    with pytest.raises(ev.LeakageError, match="outer fold 3"):
        audit.check(plan)
    bg = ev.LeakageAudit()
    bg.record(None, "autoencoder", ["bgC000", "P001"])
    with pytest.raises(ev.LeakageError, match="evaluation cohort"):
        bg.check(plan, ["P001"])


def test_late_fusion_and_mlp_paths():
    c = cohort(10, 10, seed=2)
    f = features_for(c, lambda lab, rng: lab + rng.standard_normal(3), seed=3)
    f.streams["wideband"] = f.streams["narrowband"][:, :2] + 0.1
    late = ev.run_nested_cv(f, c, ev.CVConfig(fusion="late", **FAST_GRID))
    assert late.mean["accuracy"] >= 0.7
    assert any(k.startswith("w.") for k in late.folds[0].params)
    mlp = ev.run_nested_cv(f, c, ev.CVConfig(classifier="mlp", mlp=clf.MlpConfig(hidden=(8,), epochs=20)))
    assert mlp.mean["accuracy"] >= 0.7
    assert all(0 <= r["score"] <= 1 for r in mlp.speakers)


def test_report_is_deterministic_and_serialisable():
    c = cohort(10, 10, seed=3)
    f = features_for(c, lambda lab, rng: 0.5 * lab + rng.standard_normal(3), seed=4)
    a = ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID))
    b = ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID))
    assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
    d = a.to_dict()
    assert d["schema"] == "msfusion.evalreport/1" and d["rho_pooling"] == "pooled"
    table = a.format_table()
    assert table.splitlines()[-1].startswith("spearman rho vs severity")
    for key in ("accuracy", "precision", "recall", "auc"):
        assert 0.0 <= a.mean[key] <= 1.0


def test_controls_without_severity_are_left_out_of_rho():
    c = ev.Cohort([e if e.label == "patient" else ev.CohortEntry(e.speaker_id, e.utterance_id, e.label)
                   for e in cohort(10, 10).entries])
    f = features_for(c, lambda lab, rng: lab + rng.standard_normal(2))
    rep = ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID))
    assert all(r["severity"] is None for r in rep.speakers if r["label"] == -1)
    assert rep.rho is not None


def test_features_for_unknown_speaker_rejected():
    c = cohort(10, 10)
    f = features_for(c, lambda lab, rng: np.zeros(2))
    f.speaker_ids[0] = "ghost"
    with pytest.raises(ValueError, match="absent"):
        ev.run_nested_cv(f, c, ev.CVConfig(**FAST_GRID))


def test_fit_classifier_calibrates():
    c = cohort(10, 10, seed=5)
    f = features_for(c, lambda lab, rng: lab + rng.standard_normal(3), seed=6)
    model, params = ev.fit_classifier(f, c, ev.CVConfig(**FAST_GRID))
    assert model.platt_A is not None and params["C"] in FAST_GRID["C_grid"]
    s = model.score(f.streams["narrowband"])
    assert np.all((s > 0) & (s < 1))
    with pytest.raises(ValueError, match="late"):
        ev.fit_classifier(f, c, ev.CVConfig(fusion="late"))
