"""Speaker-stratified nested cross-validation and metrics."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist
from scipy.stats import rankdata

from . import classifiers as clf
from . import kernels

log = logging.getLogger(__name__)

LABELS = {"patient": 1, "control": -1}
SEVERITY_RANGE = (0.0, 52.0)
FUSION_MODES = ("none", "early", "late", "multispectral")


class LeakageError(AssertionError):
    pass


class SpearmanUndefinedError(ValueError):
    pass


@dataclass(frozen=True)
class CohortEntry:
    speaker_id: str
    utterance_id: str
    label: str
    severity: float | None = None
    source: str = ""


@dataclass
class Cohort:
    entries: list

    def __post_init__(self):
        seen = {}
        for e in self.entries:
            if e.label not in LABELS:
                raise ValueError(f"speaker {e.speaker_id}: label {e.label!r} is not patient/control")
            if e.severity is not None and not SEVERITY_RANGE[0] <= e.severity <= SEVERITY_RANGE[1]:
                raise ValueError(f"speaker {e.speaker_id}: severity {e.severity} outside [0, 52]")
            if seen.setdefault(e.speaker_id, e.label) != e.label:
                raise ValueError(f"speaker {e.speaker_id} has more than one label")

    @property
    def speakers(self) -> list:
        return sorted({e.speaker_id for e in self.entries})

    def label_of(self) -> dict:
        return {e.speaker_id: LABELS[e.label] for e in self.entries}

    def severity_of(self) -> dict:
        out = {}
        for e in self.entries:
            if e.severity is not None:
                out.setdefault(e.speaker_id, e.severity)
        return out


@dataclass
class FoldPlan:
    outer: list  # test speaker lists
    inner: list  # per outer fold, list of inner validation speaker lists
    seed: int = 0

    def train_speakers(self, k: int) -> list:
        test = set(self.outer[k])
        return sorted(s for fold in self.outer for s in fold if s not in test)

    def validate(self, labels: dict | None = None):
        all_spk = [s for fold in self.outer for s in fold]
        if len(all_spk) != len(set(all_spk)):
            raise LeakageError("outer test folds overlap")
        for k, inner in enumerate(self.inner):
            test = set(self.outer[k])
            inner_all = [s for fold in inner for s in fold]
            if set(inner_all) & test:
                raise LeakageError(f"outer fold {k}: inner folds contain outer-test speakers")
            if sorted(inner_all) != self.train_speakers(k) or len(inner_all) != len(set(inner_all)):
                raise LeakageError(f"outer fold {k}: inner folds do not partition the training speakers")
        if labels is not None:
            for k, fold in enumerate(self.outer):
                if len({labels[s] for s in fold}) != 2:
                    raise ValueError(f"outer fold {k} lacks one class")
                for j, f in enumerate(self.inner[k]):
                    if len({labels[s] for s in f}) != 2:
                        raise ValueError(f"inner fold {k}.{j} lacks one class")


def _deal(speakers_by_class: list, n_folds: int) -> list:
    folds = [[] for _ in range(n_folds)]
    pos = 0
    for group in speakers_by_class:
        for s in group:
            folds[pos % n_folds].append(s)
            pos += 1
    return [sorted(f) for f in folds]


def make_fold_plan(cohort: Cohort, seed: int = 0, n_outer: int = 10, n_inner: int = 9) -> FoldPlan:
    """Class-stratified, speaker-disjoint outer and inner folds."""
    labels = cohort.label_of()
    rng = np.random.default_rng(seed)
    by_class = []
    for cls in (1, -1):
        spk = sorted(s for s, l in labels.items() if l == cls)
        if len(spk) < n_outer:
            raise ValueError(f"need at least {n_outer} speakers per class, class {cls:+d} has {len(spk)}")
        by_class.append([spk[i] for i in rng.permutation(len(spk))])
    outer = _deal(by_class, n_outer)
    inner = []
    for k in range(n_outer):
        test = set(outer[k])
        train_by_class = [[s for s in grp if s not in test] for grp in by_class]
        train_by_class = [[g[i] for i in rng.permutation(len(g))] for g in train_by_class]
        inner.append(_deal(train_by_class, n_inner))
    plan = FoldPlan(outer, inner, seed)
    plan.validate(labels)
    return plan


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def aggregate_per_speaker(speaker_ids, scores, utterance_ids=None) -> dict:
    """Mean segment score per speaker.

    With ``utterance_ids`` the segments are first averaged per utterance and
    the utterance means are then averaged per speaker.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if len(speaker_ids) != scores.shape[0]:
        raise ValueError("one speaker tag per segment score is required")
    groups = defaultdict(list)
    if utterance_ids is None:
        for s, v in zip(speaker_ids, scores):
            groups[s].append(v)
        return {s: float(np.mean(v)) for s, v in groups.items()}
    utt = defaultdict(list)
    for s, u, v in zip(speaker_ids, utterance_ids, scores):
        utt[(s, u)].append(v)
    for (s, _), v in utt.items():
        groups[s].append(float(np.mean(v)))
    return {s: float(np.mean(v)) for s, v in groups.items()}


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman_rho needs two vectors of equal length")
    if x.size < 3:
        raise ValueError("spearman_rho needs at least three observations")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    if denom == 0:
        raise SpearmanUndefinedError("spearman_rho is undefined for a constant vector")
    return float(np.sum(rx * ry) / denom)


def auc_score(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels) > 0
    pos, neg = s[y], s[~y]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs both classes")
    wins = 0.0
    for chunk in np.array_split(pos, max(1, pos.size // 512)):
        diff = chunk[:, None] - neg[None, :]
        wins += np.sum(diff > 0) + 0.5 * np.sum(diff == 0)
    return float(wins / (pos.size * neg.size))


@dataclass
class Metrics:
    accuracy: float
    precision: float
    recall: float
    auc: float | None


def compute_metrics(scores, predictions, labels) -> Metrics:
    """Accuracy, macro-averaged precision and recall, and pair-counting AUC."""
    pred = np.asarray(predictions)
    y = np.asarray(labels)
    if y.size == 0 or pred.shape != y.shape:
        raise ValueError("predictions and labels must be non-empty and aligned")
    precisions, recalls = [], []
    for cls in (1, -1):
        tp = np.sum((pred == cls) & (y == cls))
        n_pred, n_true = np.sum(pred == cls), np.sum(y == cls)
        precisions.append(tp / n_pred if n_pred else 0.0)
        recalls.append(tp / n_true if n_true else 0.0)
    present = [np.any(y == c) for c in (1, -1)]
    recall = float(np.mean([r for r, p in zip(recalls, present) if p]))
    auc = auc_score(scores, y) if all(present) else None
    return Metrics(float(np.mean(pred == y)), float(np.mean(precisions)), recall, auc)


# ---------------------------------------------------------------------------
# Nested cross-validation
# ---------------------------------------------------------------------------

@dataclass
class SegmentFeatures:
    """Per-segment feature matrices, one per stream, with identity tags."""

    speaker_ids: list
    utterance_ids: list
    streams: dict

    def __post_init__(self):
        n = len(self.speaker_ids)
        for k, v in self.streams.items():
            if v.shape[0] != n:
                raise ValueError(f"stream {k}: {v.shape[0]} rows for {n} segments")

    def rows_for(self, speakers) -> np.ndarray:
        wanted = set(speakers)
        return np.array([i for i, s in enumerate(self.speaker_ids) if s in wanted], dtype=int)


@dataclass
class CVConfig:
    classifier: str = "svm"
    fusion: str = "none"
    C_grid: tuple = clf.SVM_C_GRID
    gamma_grid: tuple = clf.SVM_GAMMA_GRID
    svm_tol: float = 1e-3
    mlp: clf.MlpConfig = field(default_factory=clf.MlpConfig)
    fusion_lr: float = 1e-2
    fusion_epochs: int = 100
    fusion_l2: float = 1e-3
    per_utterance: bool = False
    n_outer: int = 10
    n_inner: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.classifier not in ("svm", "mlp"):
            raise ValueError(f"unknown classifier {self.classifier!r}")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {self.fusion!r}")


class LeakageAudit:
    """Records which speakers fed each fitted component, per outer fold."""

    def __init__(self):
        self.events = []

    def record(self, fold, stage, speakers):
        self.events.append((fold, stage, frozenset(speakers)))

    def check(self, plan: FoldPlan, cohort_speakers=()):
        for fold, stage, speakers in self.events:
            if fold is None:
                bad = speakers & set(cohort_speakers)
            else:
                bad = speakers & set(plan.outer[fold])
            if bad:
                where = "evaluation cohort" if fold is None else f"outer fold {fold} test set"
                raise LeakageError(f"{stage} saw speakers from the {where}: {sorted(bad)[:5]}")
        return True

    def stages(self) -> set:
        return {stage for _, stage, _ in self.events}


@dataclass
class FoldResult:
    fold: int
    accuracy: float
    auc: float
    precision: float
    recall: float
    n_test: int
    params: dict


@dataclass
class EvalReport:
    folds: list
    mean: dict
    rho: float | None
    rho_pooling: str
    speakers: list
    config: dict

    def to_dict(self) -> dict:
        return {
            "schema": "msfusion.evalreport/1",
            "config": self.config,
            "folds": [asdict(f) for f in self.folds],
            "mean": self.mean,
            "rho": self.rho,
            "rho_pooling": self.rho_pooling,
            "speakers": self.speakers,
        }

    def format_table(self) -> str:
        lines = [f"{'fold':>4} {'acc':>6} {'auc':>6} {'prec':>6} {'rec':>6} {'n':>4}  params"]
        for f in self.folds:
            params = " ".join(f"{k}={v:g}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(f.params.items()))
            lines.append(f"{f.fold:>4} {f.accuracy:6.3f} {f.auc:6.3f} {f.precision:6.3f} {f.recall:6.3f} {f.n_test:>4}  {params}")
        m = self.mean
        lines.append(f"{'mean':>4} {m['accuracy']:6.3f} {m['auc']:6.3f} {m['precision']:6.3f} {m['recall']:6.3f}")
        rho = "n/a" if self.rho is None else f"{self.rho:.3f}"
        lines.append(f"spearman rho vs severity, {self.rho_pooling} over outer-test speakers: {rho}")
        return "\n".join(lines)


def _speaker_accuracy(speaker_ids, decisions, labels) -> float:
    agg = aggregate_per_speaker(speaker_ids, decisions)
    return float(np.mean([clf.predict_labels(v) == labels[s] for s, v in agg.items()]))


class _SvmGrid:
    """Inner-fold grid search with per-fold standardisation and cached distances."""

    def __init__(self, X, y, speaker_ids, inner_folds, config: CVConfig):
        self.X, self.y, self.spk = X, y, speaker_ids
        self.config = config
        self.splits = []
        spk = np.asarray(speaker_ids)
        for fold in inner_folds:
            val = np.isin(spk, list(fold))
            tr = ~val
            scaler = clf.Standardizer().fit(X[tr])
            Ztr, Zva = scaler.transform(X[tr]), scaler.transform(X[val])
            self.splits.append((np.flatnonzero(tr), np.flatnonzero(val),
                                cdist(Ztr, Ztr, "sqeuclidean"), cdist(Zva, Ztr, "sqeuclidean")))

    def search(self, labels):
        best = None
        n = len(self.y)
        for C in self.config.C_grid:
            for gamma in self.config.gamma_grid:
                oof = np.zeros(n)
                accs = []
                for tr, va, Dtr, Dva in self.splits:
                    ytr = self.y[tr]
                    alpha, b, _ = kernels.smo_solve(np.exp(-gamma * Dtr), ytr, C, tol=self.config.svm_tol)
                    oof[va] = np.exp(-gamma * Dva) @ (alpha * ytr) + b
                    accs.append(_speaker_accuracy([self.spk[i] for i in va], oof[va], labels))
                acc = float(np.mean(accs))
                if best is None or acc > best[0]:
                    best = (acc, C, gamma, oof)
        return best


def _fit_stream_svm(X, y, spk, inner, labels, config, audit, fold, stage):
    train_speakers = set(spk)
    audit.record(fold, f"{stage}:scaler+grid", train_speakers)
    acc, C, gamma, oof = _SvmGrid(X, y, spk, inner, config).search(labels)
    audit.record(fold, f"{stage}:final", train_speakers)
    model = clf.svm_train(X, y, C=C, gamma=gamma, tol=config.svm_tol)
    return model, oof, {"C": C, "gamma": gamma, "inner_acc": acc}


def _fit_stream_mlp(X, y, spk, inner, labels, config, audit, fold, stage):
    spk_arr = np.asarray(spk)
    oof = np.zeros(len(y))
    # first inner fold picks the epoch count; every inner fold supplies out-of-fold scores
    val = np.isin(spk_arr, list(inner[0]))
    audit.record(fold, f"{stage}:early-stop", set(spk))
    probe = clf.mlp_train(X[~val], y[~val], config.mlp, valid=(X[val], y[val]))
    epochs = max(1, probe.epochs_trained)
    fixed = clf.MlpConfig(**{**asdict(config.mlp), "epochs": epochs})
    for f in inner:
        va = np.isin(spk_arr, list(f))
        oof[va] = clf.mlp_train(X[~va], y[~va], fixed).decision(X[va])
    audit.record(fold, f"{stage}:final", set(spk))
    model = clf.mlp_train(X, y, fixed)
    return model, oof, {"epochs": epochs}


def run_nested_cv(features: SegmentFeatures, cohort: Cohort, config: CVConfig,
                  plan: FoldPlan | None = None, audit: LeakageAudit | None = None,
                  progress=None) -> EvalReport:
    """Outer folds estimate performance; inner folds choose hyper-parameters.

    ``fusion='late'`` trains one classifier per stream and combines their
    out-of-fold scores with hinge-loss weights; every other mode classifies
    the concatenation of all streams.
    """
    labels = cohort.label_of()
    severity = cohort.severity_of()
    plan = plan or make_fold_plan(cohort, config.seed, config.n_outer, config.n_inner)
    audit = audit if audit is not None else LeakageAudit()
    missing = set(features.speaker_ids) - set(labels)
    if missing:
        raise ValueError(f"features for speakers absent from the cohort: {sorted(missing)[:5]}")
    stream_names = list(features.streams)
    if config.fusion == "late":
        if len(stream_names) < 2:
            raise ValueError("late fusion needs at least two streams")
        stream_X = {n: features.streams[n] for n in stream_names}
    else:
        stream_X = {"fused": clf.early_fuse([features.streams[n] for n in stream_names])}
    fit = _fit_stream_svm if config.classifier == "svm" else _fit_stream_mlp

    fold_results, speaker_rows = [], []
    for k, test_speakers in enumerate(plan.outer):
        train_rows = features.rows_for(plan.train_speakers(k))
        test_rows = features.rows_for(test_speakers)
        tr_spk = [features.speaker_ids[i] for i in train_rows]
        te_spk = [features.speaker_ids[i] for i in test_rows]
        y_tr = np.array([labels[s] for s in tr_spk], dtype=np.float64)

        decisions, oofs, params = {}, {}, {}
        for name, X in stream_X.items():
            model, oof, p = fit(X[train_rows], y_tr, tr_spk, plan.inner[k], labels, config, audit, k, name)
            decisions[name] = model.decision(X[test_rows])
            oofs[name] = oof
            params.update({f"{name}.{a}" if len(stream_X) > 1 else a: v for a, v in p.items()})
        if config.fusion == "late":
            audit.record(k, "late-fusion", set(tr_spk))
            fw = clf.learn_fusion_weights(oofs, y_tr, config.fusion_lr, config.fusion_epochs,
                                          config.fusion_l2, seed=config.seed + k)
            dec_test = clf.late_fuse(fw, decisions)
            oof_fused = clf.late_fuse(fw, oofs)
            params.update({f"w.{n}": float(w) for n, w in zip(fw.streams, fw.weights)})
            kind = "svm"  # fused scores are decision-like; calibrate with Platt
        else:
            dec_test = decisions["fused"]
            oof_fused = oofs["fused"]
            kind = config.classifier
        audit.record(k, "calibration", set(tr_spk))
        if kind == "svm":
            A, B = clf.platt_calibrate(oof_fused, y_tr)
            score_test = clf.platt_probability(dec_test, A, B)
            params.update({"platt_A": A, "platt_B": B})
        else:
            score_test = dec_test + 0.5

        utt = [features.utterance_ids[i] for i in test_rows] if config.per_utterance else None
        spk_dec = aggregate_per_speaker(te_spk, dec_test, utt)
        spk_score = aggregate_per_speaker(te_spk, score_test, utt)
        order = sorted(spk_dec)
        yk = np.array([labels[s] for s in order])
        dk = np.array([spk_dec[s] for s in order])
        pk = clf.predict_labels(dk)
        m = compute_metrics(dk, pk, yk)
        fold_results.append(FoldResult(k, m.accuracy, m.auc, m.precision, m.recall, len(order), params))
        for s, d, p in zip(order, dk, pk):
            speaker_rows.append({
                "speaker": s, "fold": k, "label": int(labels[s]), "severity": severity.get(s),
                "decision": float(d), "score": float(spk_score[s]), "prediction": int(p),
            })
        if progress:
            progress(k, m)
        log.info("fold %d accuracy %.3f auc %.3f", k, m.accuracy, m.auc)

    audit.check(plan)
    with_sev = [r for r in speaker_rows if r["severity"] is not None]
    rho = None
    if len(with_sev) >= 3:
        try:
            rho = spearman_rho([r["score"] for r in with_sev], [r["severity"] for r in with_sev])
        except SpearmanUndefinedError:
            rho = None
    mean = {key: float(np.mean([getattr(f, key) for f in fold_results]))
            for key in ("accuracy", "auc", "precision", "recall")}
    cfg = {"classifier": config.classifier, "fusion": config.fusion, "streams": stream_names,
           "seed": config.seed, "n_outer": config.n_outer, "n_inner": config.n_inner,
           "per_utterance": config.per_utterance}
    return EvalReport(fold_results, mean, rho, "pooled",
                      sorted(speaker_rows, key=lambda r: (r["fold"], r["speaker"])), cfg)


def make_speaker_folds(cohort: Cohort, n_folds: int = 9, seed: int = 0) -> list:
    """Class-stratified speaker folds over the whole cohort."""
    labels = cohort.label_of()
    rng = np.random.default_rng(seed)
    groups = []
    for cls in (1, -1):
        spk = sorted(s for s, l in labels.items() if l == cls)
        if len(spk) < n_folds:
            raise ValueError(f"need at least {n_folds} speakers per class, class {cls:+d} has {len(spk)}")
        groups.append([spk[i] for i in rng.permutation(len(spk))])
    return _deal(groups, n_folds)


def fit_classifier(features: SegmentFeatures, cohort: Cohort, config: CVConfig):
    """Grid search over speaker folds, refit on everything, calibrate on out-of-fold scores.

    Returns (model, params). Streams are concatenated; late fusion is only
    available inside ``run_nested_cv``.
    """
    if config.fusion == "late":
        raise ValueError("late fusion models are only built inside nested cross-validation")
    labels = cohort.label_of()
    X = clf.early_fuse([features.streams[n] for n in features.streams])
    spk = list(features.speaker_ids)
    y = np.array([labels[s] for s in spk], dtype=np.float64)
    folds = make_speaker_folds(cohort, config.n_inner, config.seed)
    fit = _fit_stream_svm if config.classifier == "svm" else _fit_stream_mlp
    model, oof, params = fit(X, y, spk, folds, labels, config, LeakageAudit(), None, "final")
    if config.classifier == "svm":
        model.platt_A, model.platt_B = clf.platt_calibrate(oof, y)
        params.update({"platt_A": model.platt_A, "platt_B": model.platt_B})
    return model, params
