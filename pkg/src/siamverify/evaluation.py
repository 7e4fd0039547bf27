"""Verification metrics: equal error rate and LFW-style k-fold accuracy.

Decision convention: a trial is accepted as a match when ``score >= t``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    id_a: str
    id_b: str
    label: int
    fold: int


@dataclass
class TrialSet:
    trials: list
    num_folds: int

    def __post_init__(self):
        for t in self.trials:
            if t.label not in (0, 1):
                raise EvaluationError(f"trial {t.id_a},{t.id_b}: label must be 0 or 1")
            if not 0 <= t.fold < self.num_folds:
                raise EvaluationError(f"trial {t.id_a},{t.id_b}: fold {t.fold} out of range")

    def __len__(self):
        return len(self.trials)

    @property
    def labels(self) -> np.ndarray:
        return np.array([t.label for t in self.trials], dtype=np.int64)

    @property
    def folds(self) -> np.ndarray:
        return np.array([t.fold for t in self.trials], dtype=np.int64)

    def write(self, path) -> None:
        lines = [f"#trials v1 folds={self.num_folds}"]
        lines += [f"{t.id_a},{t.id_b},{t.label},{t.fold}" for t in self.trials]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrialSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("#trials v1 folds="):
            raise EvaluationError(f"{path}: missing '#trials v1' header")
        num_folds = int(lines[0].split("=", 1)[1])
        trials = []
        for n, line in enumerate(lines[1:], start=2):
            f = line.split(",")
            if len(f) != 4:
                raise EvaluationError(f"{path}:{n}: expected id_a,id_b,label,fold")
            trials.append(Trial(f[0], f[1], int(f[2]), int(f[3])))
        return cls(trials, num_folds)


@dataclass
class EvalReport:
    eer: float
    eer_threshold: float
    accuracy_mean: float
    accuracy_std: float
    fold_thresholds: list = field(default_factory=list)
    fold_accuracies: list = field(default_factory=list)
    roc: list = field(default_factory=list)
    num_genuine: int = 0
    num_impostor: int = 0

    def records(self) -> list[tuple[str, float]]:
        out = [("eer", self.eer), ("eer_threshold", self.eer_threshold),
               ("accuracy_mean", self.accuracy_mean), ("accuracy_std", self.accuracy_std),
               ("num_genuine", self.num_genuine), ("num_impostor", self.num_impostor)]
        out += [(f"fold{i}_accuracy", a) for i, a in enumerate(self.fold_accuracies)]
        out += [(f"fold{i}_threshold", t) for i, t in enumerate(self.fold_thresholds)]
        return out

    def to_text(self) -> str:
        lines = ["verification report",
                 f"  trials        {self.num_genuine} genuine / {self.num_impostor} impostor",
                 f"  EER           {100 * self.eer:.4f} %  (threshold {self.eer_threshold:.9g})",
                 f"  accuracy      {100 * self.accuracy_mean:.4f} % +/- {100 * self.accuracy_std:.4f}"]
        for i, (a, t) in enumerate(zip(self.fold_accuracies, self.fold_thresholds)):
            lines.append(f"  fold {i:2d}       acc {100 * a:8.4f} %  threshold {t:.9g}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(self.to_text(), encoding="utf-8")
        (out / "metrics.csv").write_text(
            "".join(f"{k},{v:.9g}\n" for k, v in self.records()), encoding="utf-8")
        (out / "roc.csv").write_text(
            "".join(f"{t:.9g},{fa:.9g},{fr:.9g}\n" for t, fa, fr in self.roc), encoding="utf-8")


def _as_scores(values, name) -> np.ndarray:
    a = np.asarray(values, dtype=np.float64).ravel()
    if a.size == 0:
        raise EvaluationError(f"{name} score set is empty")
    if not np.all(np.isfinite(a)):
        raise EvaluationError(f"{name} scores contain non-finite values")
    return a


def error_counts(genuine, impostor, thresholds):
    """Integer (false accepts, false rejects) at each threshold."""
    g = np.sort(genuine)
    i = np.sort(impostor)
    fa = i.size - np.searchsorted(i, thresholds, side="left")
    fr = np.searchsorted(g, thresholds, side="left")
    return fa, fr


def roc_curve(genuine, impostor):
    """Threshold sweep at midpoints of adjacent distinct scores, with +/-inf ends.

    Returns ``(thresholds, far, frr)``; FAR is non-increasing and FRR
    non-decreasing along the (increasing) thresholds.
    """
    g = _as_scores(genuine, "genuine")
    i = _as_scores(impostor, "impostor")
    distinct = np.unique(np.concatenate([g, i]))
    mids = (distinct[:-1] + distinct[1:]) / 2
    thresholds = np.concatenate([[-np.inf], mids, [np.inf]])
    fa, fr = error_counts(g, i, thresholds)
    return thresholds, fa / i.size, fr / g.size


def compute_eer(genuine, impostor) -> tuple[float, float]:
    """Equal error rate and the threshold where FAR and FRR cross.

    Between the two adjacent sweep points where ``FAR - FRR`` changes sign
    the rates are interpolated linearly. The interpolation runs on exact
    rationals built from the integer error counts.
    """
    g = _as_scores(genuine, "genuine")
    i = _as_scores(impostor, "impostor")
    distinct = np.unique(np.concatenate([g, i]))
    thresholds = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2, [np.inf]])
    fa, fr = error_counts(g, i, thresholds)
    ng, ni = g.size, i.size
    # sign of FAR - FRR without rounding
    diff = fa.astype(object) * ng - fr.astype(object) * ni
    j = int(np.argmax(np.asarray([d <= 0 for d in diff])))
    if diff[j] == 0:
        return float(Fraction(int(fa[j]), ni)), _finite_threshold(thresholds, j, j, distinct)
    d0, d1 = Fraction(int(diff[j - 1]), ni * ng), Fraction(int(diff[j]), ni * ng)
    alpha = d0 / (d0 - d1)
    far0, far1 = Fraction(int(fa[j - 1]), ni), Fraction(int(fa[j]), ni)
    eer = far0 + alpha * (far1 - far0)
    t0, t1 = thresholds[j - 1], thresholds[j]
    if math.isinf(t0) or math.isinf(t1):
        thr = _finite_threshold(thresholds, j - 1, j, distinct)
    else:
        thr = float(t0 + float(alpha) * (t1 - t0))
    return float(eer), thr


def _finite_threshold(thresholds, j0, j1, distinct) -> float:
    for t in (thresholds[j1], thresholds[j0]):
        if math.isfinite(t):
            return float(t)
    # only one distinct score exists
    return float(distinct[0])


def best_threshold(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy-maximising threshold on a labelled set (ties: lowest threshold).

    Candidates are midpoints between adjacent distinct scores plus
    ``-inf``/``+inf``, so the chosen threshold sits inside a score gap.
    """
    order = np.argsort(scores, kind="stable")
    s, y = scores[order], labels[order]
    distinct = np.unique(s)
    cands = np.concatenate([[-np.inf], (distinct[:-1] + distinct[1:]) / 2, [np.inf]])
    below = np.searchsorted(s, cands, side="left")
    pos_below = np.concatenate([[0], np.cumsum(y)])[below]
    neg_below = below - pos_below
    correct = neg_below + (y.sum() - pos_below)
    k = int(np.argmax(correct))
    return float(cands[k]), correct[k] / len(s)


def kfold_accuracy(scores, trials: TrialSet):
    """Per-fold accuracy with thresholds chosen on the complementary folds.

    Returns ``(mean, population std, per-fold thresholds, per-fold accuracies)``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels, folds = trials.labels, trials.folds
    if scores.shape != labels.shape:
        raise EvaluationError("one score per trial is required")
    if trials.num_folds < 2:
        raise EvaluationError("k-fold accuracy needs at least 2 folds")
    thresholds, accs = [], []
    for f in range(trials.num_folds):
        test = folds == f
        if not test.any():
            raise EvaluationError(f"fold {f} is empty")
        if len(np.unique(labels[test])) < 2:
            raise EvaluationError(f"fold {f} holds a single class only")
        thr, _ = best_threshold(scores[~test], labels[~test])
        thresholds.append(thr)
        accs.append(float(np.mean((scores[test] >= thr) == (labels[test] == 1))))
    return float(np.mean(accs)), float(np.std(accs)), thresholds, accs


def evaluate(scores, trials: TrialSet) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = trials.labels
    genuine, impostor = scores[labels == 1], scores[labels == 0]
    eer, thr = compute_eer(genuine, impostor)
    mean, std, thresholds, accs = kfold_accuracy(scores, trials)
    t, far, frr = roc_curve(genuine, impostor)
    return EvalReport(eer, thr, mean, std, thresholds, accs, list(zip(t, far, frr)),
                      int(genuine.size), int(impostor.size))


def build_trials(labels: Mapping[str, str], num_folds: int = 10, matched_per_fold: int = 300,
                 mismatched_per_fold: int = 300, seed: int = 0) -> TrialSet:
    """Sample a labelled verification protocol from an id -> identity map.

    Matched and mismatched pairs are drawn uniformly without replacement
    and dealt round-robin into folds after a seeded shuffle, so every fold
    gets exactly ``matched_per_fold`` + ``mismatched_per_fold`` trials and
    no unordered pair appears twice.
    """
    if num_folds < 1:
        raise EvaluationError("num_folds must be >= 1")
    if matched_per_fold < 1 or mismatched_per_fold < 1:
        raise EvaluationError("each fold needs at least one matched and one mismatched trial")
    rng = np.random.default_rng(seed)
    by_identity: dict[str, list[str]] = {}
    for image_id in sorted(labels):
        by_identity.setdefault(labels[image_id], []).append(image_id)
    n_match = num_folds * matched_per_fold
    n_mismatch = num_folds * mismatched_per_fold

    matched = [p for ident in sorted(by_identity) for p in combinations(by_identity[ident], 2)]
    if len(matched) < n_match:
        raise EvaluationError(f"need {n_match} matched pairs but only {len(matched)} exist")
    chosen = rng.choice(len(matched), size=n_match, replace=False)
    matched = [matched[c] for c in np.sort(chosen)]

    ids = sorted(labels)
    total = len(ids) * (len(ids) - 1) // 2
    possible = total - sum(len(v) * (len(v) - 1) // 2 for v in by_identity.values())
    if possible < n_mismatch:
        raise EvaluationError(f"need {n_mismatch} mismatched pairs but only {possible} exist")
    mismatched: set = set()
    while len(mismatched) < n_mismatch:
        draw = rng.integers(0, len(ids), size=(2 * (n_mismatch - len(mismatched)) + 16, 2))
        for a, b in draw:
            if a == b or labels[ids[a]] == labels[ids[b]]:
                continue
            mismatched.add((ids[min(a, b)], ids[max(a, b)]))
            if len(mismatched) == n_mismatch:
                break
    mismatched_list = sorted(mismatched)

    trials = []
    for pairs, label, per_fold in ((matched, 1, matched_per_fold), (mismatched_list, 0, mismatched_per_fold)):
        order = rng.permutation(len(pairs))
        for slot, idx in enumerate(order):
            a, b = pairs[idx]
            trials.append(Trial(a, b, label, slot // per_fold))
    trials.sort(key=lambda t: (t.fold, -t.label, t.id_a, t.id_b))
    return TrialSet(trials, num_folds)


def score_matrix_trials(scores: Sequence[float], trials: TrialSet):
    """Pair each trial with its score as ``ScoredTrial`` records."""
    from .siamese import ScoredTrial

    return [ScoredTrial(t.id_a, t.id_b, float(s), t.label) for t, s in zip(trials.trials, scores)]
