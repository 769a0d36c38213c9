"""Anomaly scores, threshold selection, and evaluation metrics.

A window's anomaly score is the mean absolute reconstruction error of the
full (unmasked) window under the trained model. Ranking quality is summarised
by the Mann-Whitney AUC with a Hanley-McNeil confidence interval; binary
decisions use the threshold maximising the geometric mean of recall and true
negative rate, with class-weighted precision/recall and balanced accuracy
reported under a proportion-variance confidence interval.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import FormatError, MetricError, ParameterError
from .model import forward


@dataclass
class ScoreSet:
    ids: list
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if len(self.ids) != self.scores.size or self.scores.size != self.labels.size:
            raise ParameterError("ids, scores and labels must have equal length")
        if not np.all(np.isfinite(self.scores)):
            raise ParameterError("scores must be finite")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ParameterError("labels must be 0 or 1")

    @property
    def n_anomalous(self):
        return int(np.sum(self.labels == 1))

    @property
    def n_normal(self):
        return int(np.sum(self.labels == 0))


def mae(x, x_hat):
    """Mean absolute error over all time points and channels."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ParameterError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return float(np.abs(x - x_hat).mean())


def anomaly_score(params, window):
    """Score one (time, channels) window: MAE of its inference-mode reconstruction."""
    return float(score_windows(params, np.asarray(window)[None])[0])


def score_windows(params, windows, batch_size=256):
    """MAE scores for a stack of windows; inference mode, no masking or dropout."""
    windows = np.asarray(windows, dtype=np.float32)
    out = np.empty(len(windows), dtype=np.float64)
    with ad.no_grad():
        for lo in range(0, len(windows), batch_size):
            x = windows[lo : lo + batch_size]
            recon, _ = forward(params, x, training=False)
            err = np.abs(recon.data.astype(np.float64) - x)
            out[lo : lo + len(x)] = err.mean(axis=(1, 2))
    return out


def per_channel_mae(x, x_hat):
    """MAE per channel; used to pick the channel a heatmap export highlights."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    return np.abs(x - x_hat).mean(axis=0)


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------


def _require_both_classes(scores):
    m, n = scores.n_anomalous, scores.n_normal
    if m < 1 or n < 1:
        raise MetricError(f"metric undefined for single-class input (anomalous={m}, normal={n})")
    return m, n


def auc(scores):
    """Mann-Whitney statistic via average ranks, ties counted one half.

    Exactly equals brute-force pair counting: rank sums stay on the 0.5 grid,
    so no floating error is introduced for any realistic sample size.
    """
    m, n = _require_both_classes(scores)
    s = scores.scores
    order = np.argsort(s, kind="stable")
    ranks = np.empty(s.size, dtype=np.float64)
    sorted_s = s[order]
    i = 0
    while i < s.size:
        j = i
        while j + 1 < s.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * ((i + 1) + (j + 1))
        i = j + 1
    rank_sum = float(ranks[scores.labels == 1].sum())
    return (rank_sum - 0.5 * m * (m + 1)) / (m * n)


def auc_variance(a, m, n):
    """Hanley-McNeil AUC variance; negative floating residue clamps to zero."""
    if m < 1 or n < 1:
        raise MetricError(f"variance undefined for m={m}, n={n}")
    if not 0.0 <= a <= 1.0:
        raise ParameterError(f"AUC must lie in [0, 1], got {a}")
    p_x = a / (2.0 - a)
    p_y = 2.0 * a * a / (1.0 + a)
    var = (a * (1.0 - a) + (m - 1) * (p_x - a * a) + (n - 1) * (p_y - a * a)) / (m * n)
    return max(var, 0.0)


def auc_ci(a, m, n):
    """95% half-width, 1.96 times the Hanley-McNeil standard deviation."""
    return 1.96 * math.sqrt(auc_variance(a, m, n))


def proportion_ci(a, m, n):
    """95% half-width under the proportion variance a(1-a)/(m+n)."""
    if m + n < 1:
        raise MetricError("proportion CI needs at least one observation")
    if not 0.0 <= a <= 1.0:
        raise ParameterError(f"metric must lie in [0, 1], got {a}")
    return 1.96 * math.sqrt(a * (1.0 - a) / (m + n))


# ---------------------------------------------------------------------------
# thresholding and binary metrics
# ---------------------------------------------------------------------------


def candidate_thresholds(values):
    """Midpoints between consecutive distinct sorted scores, plus +/-inf sentinels."""
    distinct = np.unique(np.asarray(values, dtype=np.float64))
    mids = 0.5 * (distinct[:-1] + distinct[1:])
    return np.concatenate(([-np.inf], mids, [np.inf]))


def select_threshold(scores):
    """Cut maximising sqrt(TPR * TNR); ties resolve to the lowest threshold.

    Windows are predicted anomalous when score > threshold (strict). If every
    candidate scores zero (e.g. all scores equal) the lowest sentinel is
    returned with a warning.
    """
    m, n = _require_both_classes(scores)
    cands = candidate_thresholds(scores.scores)
    pos = np.sort(scores.scores[scores.labels == 1])
    neg = np.sort(scores.scores[scores.labels == 0])
    # score > threshold counts, vectorised over all candidates
    tp = m - np.searchsorted(pos, cands, side="right")
    tn = np.searchsorted(neg, cands, side="right")
    gmean = np.sqrt((tp / m) * (tn / n))
    best = int(np.argmax(gmean))  # argmax returns the first (lowest) maximiser
    if gmean[best] == 0.0:
        warnings.warn("no threshold separates the classes; returning the lowest sentinel")
    return float(cands[best])


@dataclass
class ClassificationMetrics:
    weighted_precision: float
    weighted_recall: float
    balanced_accuracy: float


def classification_metrics(scores, threshold):
    """Support-weighted precision/recall and balanced accuracy at a threshold."""
    m, n = _require_both_classes(scores)
    pred = scores.scores > threshold
    truth = scores.labels == 1
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))

    def _precision(hits, predicted, cls):
        if predicted == 0:
            warnings.warn(f"no windows predicted as class {cls}; its precision set to 0")
            return 0.0
        return hits / predicted

    prec_pos = _precision(tp, tp + fp, 1)
    prec_neg = _precision(tn, tn + fn, 0)
    rec_pos = tp / m
    rec_neg = tn / n
    total = m + n
    return ClassificationMetrics(
        weighted_precision=(m * prec_pos + n * prec_neg) / total,
        weighted_recall=(m * rec_pos + n * rec_neg) / total,
        balanced_accuracy=0.5 * (rec_pos + rec_neg),
    )


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    threshold: float
    weighted_precision: float
    weighted_recall: float
    balanced_accuracy: float
    auc: float
    precision_ci95: float
    recall_ci95: float
    accuracy_ci95: float
    auc_ci95: float
    n_anomalous: int
    n_normal: int
    threshold_policy: str

    def to_dict(self):
        def _jsonable(v):
            if isinstance(v, float) and not math.isfinite(v):
                return repr(v)
            return v

        return {k: _jsonable(v) for k, v in self.__dict__.items()}


def evaluate(test_scores, calibration_scores=None, threshold_on_test=False):
    """Full evaluation of a scored test split.

    The decision threshold comes from a labelled calibration split by default;
    ``threshold_on_test`` instead selects it on the test scores themselves
    (optimistic: the threshold then sees test labels).
    """
    if threshold_on_test:
        threshold = select_threshold(test_scores)
        policy = "test"
    else:
        if calibration_scores is None:
            raise ParameterError(
                "calibration scores are required unless threshold_on_test is set"
            )
        threshold = select_threshold(calibration_scores)
        policy = "calibration"
    m, n = _require_both_classes(test_scores)
    cm = classification_metrics(test_scores, threshold)
    a = auc(test_scores)
    total = m + n
    return EvalReport(
        threshold=threshold,
        weighted_precision=cm.weighted_precision,
        weighted_recall=cm.weighted_recall,
        balanced_accuracy=cm.balanced_accuracy,
        auc=a,
        precision_ci95=proportion_ci(cm.weighted_precision, m, n),
        recall_ci95=proportion_ci(cm.weighted_recall, m, n),
        accuracy_ci95=proportion_ci(cm.balanced_accuracy, m, n),
        auc_ci95=auc_ci(a, m, n),
        n_anomalous=m,
        n_normal=n,
        threshold_policy=policy,
    )


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_scores_csv(path, scores):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "score", "label"])
        for wid, s, lab in zip(scores.ids, scores.scores, scores.labels):
            writer.writerow([wid, format(float(s), ".17g"), int(lab)])


def read_scores_csv(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty scores file") from None
        if header != ["window_id", "score", "label"]:
            raise FormatError(f"{path}: bad header {header!r}")
        ids, scores, labels = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FormatError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            try:
                score = float(row[1])
                label = int(row[2])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if label not in (0, 1):
                raise FormatError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if not math.isfinite(score):
                raise FormatError(f"{path}:{lineno}: non-finite score {row[1]}")
            ids.append(row[0])
            scores.append(score)
            labels.append(label)
    if not ids:
        raise FormatError(f"{path}: no score rows")
    return ScoreSet(ids=ids, scores=np.array(scores), labels=np.array(labels))


def write_report_json(path, report, effective_config=None):
    payload = {"report": report.to_dict()}
    if effective_config is not None:
        payload["effective_config"] = effective_config
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return payload
