"""Diagnostic metrics, precision-recall analysis and stratified k-fold CV.

Positive class is KD (label 1).  A score at or above the threshold counts as
a positive prediction.  Metrics whose denominator is zero are ``None`` and
render as an em dash; they never turn into 0 or NaN.
"""

from __future__ import annotations

import io
import json
import logging
from fractions import Fraction
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .blocks import Model, NetworkScale, build_network, forward
from .errors import ShapeError, ValidationError
from .training import RunManifest, TrainConfig, kd_score, train

log = logging.getLogger(__name__)

METRIC_ROWS = (
    ("accuracy", "Accuracy"),
    ("f1", "F1 score"),
    ("sensitivity", "Sensitivity"),
    ("specificity", "Specificity"),
    ("ppv", "Precision (PPV)"),
    ("npv", "NPV"),
)
UNDEFINED = "—"
BEST_MARK = "*"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValidationError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass
class MetricsRecord:
    accuracy: float | None
    f1: float | None
    sensitivity: float | None
    specificity: float | None
    ppv: float | None
    npv: float | None
    auprc: float | None = None
    excluded: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        if not self.excluded:
            d.pop("excluded")
        return d


@dataclass
class PrCurve:
    thresholds: np.ndarray
    recall: np.ndarray
    precision: np.ndarray
    auprc: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("threshold,recall,precision\n")
        for t, r, p in zip(self.thresholds, self.recall, self.precision):
            buf.write(f"{float(t)!r},{float(r)!r},{float(p)!r}\n")
        return buf.getvalue()


@dataclass
class FoldPlan:
    k: int
    folds: list[np.ndarray]
    tallies: list[dict[int, int]]

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))


def _check_pair(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise ShapeError(f"{s.size} scores but {y.size} labels")
    if s.size == 0:
        raise ValidationError("need at least one score")
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    return s, y.astype(np.int64)


def confusion(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    s, y = _check_pair(scores, labels)
    pred = s >= threshold
    pos = y == 1
    return ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
    )


def _pct(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def metrics_from_confusion(c: ConfusionCounts) -> MetricsRecord:
    """Table-style metrics as percentages; AUPRC is left unset."""
    if c.total <= 0:
        raise ValidationError("cannot derive metrics from an empty confusion table")
    sens = _pct(c.tp, c.tp + c.fn)
    ppv = _pct(c.tp, c.tp + c.fp)
    if sens is None or ppv is None or sens + ppv == 0:
        f1 = None
    else:
        f1 = 2 * ppv * sens / (ppv + sens)
    return MetricsRecord(
        accuracy=_pct(c.tp + c.tn, c.total),
        f1=f1,
        sensitivity=sens,
        specificity=_pct(c.tn, c.tn + c.fp),
        ppv=ppv,
        npv=_pct(c.tn, c.tn + c.fn),
    )


def pr_curve(scores, labels) -> PrCurve:
    """Precision/recall at every distinct score, highest first.

    AUPRC is the step-interpolated sum ``sum_i (R_i - R_{i-1}) * P_i`` with
    ``R_0 = 0`` (average precision).  Tied scores share one threshold.  The
    sum is accumulated in exact rationals and rounded once, so the result is
    the correctly rounded value whatever the summation order.
    """
    s, y = _check_pair(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValidationError("precision-recall needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    # last index of each block of tied scores
    last = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = tp_cum[last]
    predicted = last + 1
    recall = tp / n_pos
    precision = tp / predicted
    prev_tp = np.r_[0, tp[:-1]]
    exact = sum(
        (Fraction(int(d), n_pos) * Fraction(int(t), int(m)) for d, t, m in zip(tp - prev_tp, tp, predicted) if d),
        Fraction(0),
    )
    auprc = float(exact)
    return PrCurve(s_sorted[last], recall, precision, auprc)


def stratified_kfold(labels, k: int = 10, seed: int = 0) -> FoldPlan:
    """Shuffle each class, then deal its members round-robin over the folds.

    Dealing continues across classes from where the previous class stopped,
    so total fold sizes also differ by at most one.  A class with fewer than
    ``k`` members leaves some folds without that class (leave-one-out on a
    balanced 10-sample set is the extreme case); only ``n < k`` is rejected.
    """
    y = np.asarray(labels).ravel()
    if k < 2:
        raise ValidationError(f"k must be >= 2, got {k}")
    if len(y) < k:
        raise ValidationError(f"{len(y)} samples cannot fill k={k} folds")
    rng = np.random.default_rng(seed)
    folds: list[list[int]] = [[] for _ in range(k)]
    tallies = [{} for _ in range(k)]
    pos = 0
    for cls in np.unique(y):
        members = np.flatnonzero(y == cls)
        for idx in rng.permutation(members):
            folds[pos % k].append(int(idx))
            tallies[pos % k][int(cls)] = tallies[pos % k].get(int(cls), 0) + 1
            pos += 1
    return FoldPlan(k, [np.array(sorted(f), dtype=np.int64) for f in folds], tallies)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    test_indices: np.ndarray
    scores: np.ndarray
    confusion: ConfusionCounts
    metrics: MetricsRecord
    manifest: RunManifest
    model: Model | None = None


@dataclass
class CVResult:
    family: str
    plan: FoldPlan
    folds: list[FoldResult]
    pooled: MetricsRecord
    averaged: MetricsRecord
    curve: PrCurve
    scores: np.ndarray  # held-out score per sample, in dataset order

    def records_json(self, network: str | None = None) -> str:
        name = network or self.family
        rows = [{"network": name, "fold": f.fold, **f.metrics.to_dict()} for f in self.folds]
        rows.append({"network": name, "fold": "pooled", **self.pooled.to_dict()})
        rows.append({"network": name, "fold": "mean", **self.averaged.to_dict()})
        return json.dumps(rows, indent=2, sort_keys=True)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def _run_fold(args) -> FoldResult:
    images, labels, test_idx, train_idx, family, scale, input_size, logits, cfg, seed, fold, dtype, keep = args
    fseed = fold_seed(seed, fold)
    model = build_network(family, scale, input_size=input_size, logits=logits, seed=fseed, dtype=dtype)
    trained, manifest = train(model, images[train_idx], labels[train_idx], cfg, seed=fseed)
    logits_out, _ = forward(trained, images[test_idx], training=False)
    scores = kd_score(logits_out).astype(np.float64)
    conf = confusion(scores, labels[test_idx])
    metrics = metrics_from_confusion(conf)
    if labels[test_idx].sum() > 0:
        metrics.auprc = pr_curve(scores, labels[test_idx]).auprc
    manifest.final_metrics = metrics.to_dict()
    return FoldResult(fold, test_idx, scores, conf, metrics, manifest, trained if keep else None)


def average_records(records: Sequence[MetricsRecord]) -> MetricsRecord:
    """Per-metric mean over folds, skipping undefined values (counted in ``excluded``)."""
    out, excluded = {}, {}
    for name in [m for m, _ in METRIC_ROWS] + ["auprc"]:
        vals = [getattr(r, name) for r in records if getattr(r, name) is not None]
        missing = len(records) - len(vals)
        if missing:
            excluded[name] = missing
        out[name] = float(np.mean(vals)) if vals else None
    return MetricsRecord(**out, excluded=excluded)


def cross_validate(
    images: np.ndarray,
    labels,
    family: str,
    cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    k: int = 10,
    scale: NetworkScale | None = None,
    logits: int = 1,
    jobs: int = 1,
    keep_models: bool = False,
    dtype=np.float64,
) -> CVResult:
    """Train one model per fold and score its held-out images.

    Folds may run in parallel processes; results are reduced in fold order,
    so the outcome does not depend on ``jobs``.
    """
    images = np.asarray(images)
    labels = np.asarray(labels).astype(np.int64)
    if images.ndim != 4 or images.shape[2] != images.shape[3]:
        raise ShapeError(f"expected square (n, c, s, s) images, got {images.shape}")
    plan = stratified_kfold(labels, k, seed)
    tasks = [
        (images, labels, plan.folds[i], plan.train_indices(i), family, scale, images.shape[2], logits, cfg, seed, i, dtype, keep_models)
        for i in range(k)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = []
        for t in tasks:
            results.append(_run_fold(t))
            log.info("fold %d/%d done: %s", t[10] + 1, k, results[-1].metrics.to_dict())
    scores = np.empty(len(labels))
    for r in results:
        scores[r.test_indices] = r.scores
    pooled_conf = ConfusionCounts(0, 0, 0, 0)
    for r in results:
        pooled_conf = pooled_conf + r.confusion
    pooled = metrics_from_confusion(pooled_conf)
    curve = pr_curve(scores, labels)
    pooled.auprc = curve.auprc
    averaged = average_records([r.metrics for r in results])
    return CVResult(family, plan, results, pooled, averaged, curve, scores)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _fmt(value: float | None, digits: int) -> str:
    return UNDEFINED if value is None else f"{value:.{digits}f}"


def render_report(records: Mapping[str, MetricsRecord]) -> str:
    """Metrics as rows, networks as columns; the row maximum is marked ``*``.

    Percentages are shown with two decimals, AUPRC (row present only when some
    record has it) with three.  Ties for the maximum are all marked; the
    comparison uses the displayed (rounded) values.
    """
    if not records:
        raise ValidationError("render_report needs at least one record")
    names = list(records)
    rows = list(METRIC_ROWS)
    if any(r.auprc is not None for r in records.values()):
        rows.append(("auprc", "AUPRC"))
    label_w = max(len("Metric"), *(len(lbl) for _, lbl in rows))
    col_w = [max(len(n), 8) + 1 for n in names]
    lines = ["Metric".ljust(label_w) + "".join(f"  {n:>{w}}" for n, w in zip(names, col_w))]
    lines.append("-" * len(lines[0]))
    for key, label in rows:
        digits = 3 if key == "auprc" else 2
        cells = [_fmt(getattr(records[n], key), digits) for n in names]
        shown = [None if c == UNDEFINED else float(c) for c in cells]
        defined = [v for v in shown if v is not None]
        best = max(defined) if defined else None
        out = []
        for c, v, w in zip(cells, shown, col_w):
            mark = BEST_MARK if v is not None and v == best else " "
            out.append(f"  {c + mark:>{w}}")
        lines.append(label.ljust(label_w) + "".join(out))
    lines.append("")
    lines.append(f"{BEST_MARK} best in row; {UNDEFINED} undefined (zero denominator)")
    for n in names:
        for metric, count in sorted(records[n].excluded.items()):
            lines.append(f"{n}: {metric} undefined in {count} fold(s), excluded from the mean")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, dict[str, float | None]]:
    """Inverse of :func:`render_report` for the displayed values."""
    lines = text.splitlines()
    header = lines[0].split()
    names = header[1:]
    labels = {lbl: key for key, lbl in METRIC_ROWS + (("auprc", "AUPRC"),)}
    out: dict[str, dict[str, float | None]] = {n: {} for n in names}
    for line in lines[2:]:
        if not line.strip():
            break
        for lbl, key in labels.items():
            if line.startswith(lbl + " ") or line == lbl:
                cells = line[len(lbl) :].split()
                for n, c in zip(names, cells):
                    c = c.rstrip(BEST_MARK)
                    out[n][key] = None if c == UNDEFINED else float(c)
                break
    return out
