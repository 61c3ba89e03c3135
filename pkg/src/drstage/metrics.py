"""Staging and referable-DR evaluation battery.

Covers the confusion matrix, linearly weighted kappa, multiclass accuracy,
MSE/MAE, rDR AUC/F1/accuracy, subsampling bootstrap bands, the
Mann-Whitney U test and the extreme-error review worksheet.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from . import kernels
from .errors import (
    DegenerateVarianceError,
    EmptyInputError,
    ReliabilityError,
    UndefinedMetricError,
)

N_GRADES = 5
RDR_THRESHOLD = 2
EXACT_MAX_N = 20


def discretize(score: float) -> int:
    """Round half away from zero, then clamp to the ICDR range 0-4."""
    score = float(score)
    if not math.isfinite(score):
        raise ValueError(f"cannot discretize non-finite score {score}")
    rounded = math.copysign(math.floor(abs(score) + 0.5), score)
    return int(min(max(rounded, 0), N_GRADES - 1))


def discretize_array(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("cannot discretize non-finite scores")
    rounded = np.copysign(np.floor(np.abs(scores) + 0.5), scores)
    return np.clip(rounded, 0, N_GRADES - 1).astype(np.int64)


@dataclass(frozen=True)
class PredictionSet:
    sample_ids: tuple
    scores: np.ndarray
    grade_pred: np.ndarray
    icdr_ref: np.ndarray
    rdr_ref: np.ndarray
    dataset_ids: tuple
    image_paths: tuple = ()

    def __post_init__(self):
        n = len(self.sample_ids)
        for name in ("scores", "grade_pred", "icdr_ref", "rdr_ref", "dataset_ids"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")
        if not np.array_equal(discretize_array(self.scores), self.grade_pred):
            raise ValueError("grade_pred is inconsistent with the discretized scores")

    @classmethod
    def build(cls, sample_ids, scores, icdr_ref, rdr_ref=None, dataset_ids=None, image_paths=None):
        scores = np.asarray(scores, dtype=np.float64)
        icdr = np.asarray(icdr_ref, dtype=np.int64)
        if rdr_ref is None:
            rdr_ref = icdr >= RDR_THRESHOLD
        n = len(scores)
        return cls(
            tuple(str(s) for s in sample_ids),
            scores,
            discretize_array(scores),
            icdr,
            np.asarray(rdr_ref, dtype=bool),
            tuple(dataset_ids) if dataset_ids is not None else ("",) * n,
            tuple(image_paths) if image_paths is not None else ("",) * n,
        )

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, idx) -> "PredictionSet":
        idx = np.asarray(idx, dtype=np.intp)
        paths = tuple(self.image_paths[i] for i in idx) if self.image_paths else ()
        return PredictionSet(
            tuple(self.sample_ids[i] for i in idx),
            self.scores[idx],
            self.grade_pred[idx],
            self.icdr_ref[idx],
            self.rdr_ref[idx],
            tuple(self.dataset_ids[i] for i in idx),
            paths,
        )

    def canonical_order(self) -> np.ndarray:
        return np.array(sorted(range(len(self)), key=lambda i: self.sample_ids[i]), dtype=np.intp)


def _nonempty(preds: PredictionSet):
    if len(preds) == 0:
        raise EmptyInputError("empty prediction set")


def confusion_matrix(preds: PredictionSet) -> np.ndarray:
    """Rows index the reference grade, columns the predicted grade."""
    _nonempty(preds)
    cm = np.zeros((N_GRADES, N_GRADES), dtype=np.int64)
    np.add.at(cm, (preds.icdr_ref, preds.grade_pred), 1)
    return cm


def lw_kappa(confusion) -> float:
    """Cohen's kappa with linear disagreement weights ``|i - j| / (k - 1)``."""
    cm = np.asarray(confusion, dtype=np.float64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {cm.shape}")
    total = cm.sum()
    if total <= 0:
        raise EmptyInputError("confusion matrix is empty")
    k = cm.shape[0]
    idx = np.arange(k)
    w = np.abs(idx[:, None] - idx[None, :]) / (k - 1)
    observed = cm / total
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0))
    denom = float((w * expected).sum())
    if denom == 0.0:
        raise UndefinedMetricError("kappa undefined: both raters use a single identical grade")
    return 1.0 - float((w * observed).sum()) / denom


def mc_acc(preds: PredictionSet) -> float:
    _nonempty(preds)
    return float(np.mean(preds.grade_pred == preds.icdr_ref))


def _errors(preds: PredictionSet, discrete: bool) -> np.ndarray:
    _nonempty(preds)
    est = preds.grade_pred.astype(np.float64) if discrete else preds.scores
    return est - preds.icdr_ref


def mse(preds: PredictionSet, discrete: bool = False) -> float:
    return float(np.mean(_errors(preds, discrete) ** 2))


def mae(preds: PredictionSet, discrete: bool = False) -> float:
    return float(np.mean(np.abs(_errors(preds, discrete))))


def kappa(preds: PredictionSet) -> float:
    return lw_kappa(confusion_matrix(preds))


def roc_auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative,
    ties counted as one half, via the midrank sum."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC undefined: reference has a single class")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def rdr_auc(preds: PredictionSet) -> float:
    _nonempty(preds)
    return roc_auc(preds.scores, preds.rdr_ref)


def _rdr_pred(preds):
    return preds.grade_pred >= RDR_THRESHOLD


def rdr_f1(preds: PredictionSet) -> float:
    _nonempty(preds)
    pred = _rdr_pred(preds)
    ref = preds.rdr_ref
    tp = int(np.sum(pred & ref))
    fp = int(np.sum(pred & ~ref))
    fn = int(np.sum(~pred & ref))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def rdr_acc(preds: PredictionSet) -> float:
    _nonempty(preds)
    return float(np.mean(_rdr_pred(preds) == preds.rdr_ref))


def rdr_metrics(preds: PredictionSet) -> tuple[Optional[float], float, float]:
    """``(auc, f1, acc)``; ``auc`` is ``None`` for a single-class reference."""
    try:
        auc = rdr_auc(preds)
    except UndefinedMetricError:
        auc = None
    return auc, rdr_f1(preds), rdr_acc(preds)


METRICS: dict[str, Callable[[PredictionSet], float]] = {
    "mc_acc": mc_acc,
    "lw_kappa": kappa,
    "mse": mse,
    "mae": mae,
    "rdr_auc": rdr_auc,
    "rdr_f1": rdr_f1,
    "rdr_acc": rdr_acc,
}


# -- bootstrap ---------------------------------------------------------------


@dataclass
class BootstrapDistribution:
    values: np.ndarray  # one entry per successful resample (NaN where skipped)
    skipped: int

    @property
    def valid(self) -> np.ndarray:
        return self.values[~np.isnan(self.values)]


def _resample_indices(preds, n_resamples, frac, seed, replace):
    if n_resamples <= 0:
        raise ValueError("n_resamples must be positive")
    if not 0 < frac <= 1:
        raise ValueError(f"frac must lie in (0, 1], got {frac}")
    order = preds.canonical_order()
    size = max(1, int(math.floor(frac * len(preds))))
    for child in np.random.SeedSequence(int(seed) & 0xFFFFFFFF).spawn(n_resamples):
        rng = np.random.default_rng(child)
        yield order[rng.choice(len(order), size=size, replace=replace)]


def bootstrap_distributions(
    metrics: dict,
    preds: PredictionSet,
    n_resamples: int = 1000,
    frac: float = 0.6,
    seed: int = 0,
    replace: bool = False,
) -> dict[str, BootstrapDistribution]:
    """Evaluate several metrics on shared resamples.

    Resample ``i`` draws ``floor(frac * N)`` indices into the predictions
    sorted by sample id, using child ``i`` of ``SeedSequence(seed)``; the
    result therefore does not depend on input order. Undefined metric
    values are recorded as NaN and counted as skipped.
    """
    _nonempty(preds)
    values = {name: np.full(n_resamples, np.nan) for name in metrics}
    skipped = {name: 0 for name in metrics}
    for i, idx in enumerate(_resample_indices(preds, n_resamples, frac, seed, replace)):
        sub = preds.subset(idx)
        for name, fn in metrics.items():
            try:
                values[name][i] = fn(sub)
            except UndefinedMetricError:
                skipped[name] += 1
    return {name: BootstrapDistribution(values[name], skipped[name]) for name in metrics}


def bootstrap_distribution(
    metric: Callable[[PredictionSet], float],
    preds: PredictionSet,
    n_resamples: int = 1000,
    frac: float = 0.6,
    seed: int = 0,
    replace: bool = False,
    max_skip_fraction: float = 0.10,
) -> BootstrapDistribution:
    """Single-metric bootstrap; raises :class:`ReliabilityError` when the
    metric is undefined on more than ``max_skip_fraction`` of resamples."""
    dist = bootstrap_distributions({"m": metric}, preds, n_resamples, frac, seed, replace)["m"]
    if dist.skipped > max_skip_fraction * n_resamples:
        raise ReliabilityError(f"metric undefined on {dist.skipped} of {n_resamples} resamples")
    return dist


def interval_from(values, quantiles: Sequence[float] = (0.25, 0.75)) -> tuple[float, float]:
    values = np.asarray(values, dtype=np.float64)
    values = values[~np.isnan(values)]
    lo, hi = np.quantile(values, quantiles)
    return float(lo), float(hi)


def bootstrap_interval(
    metric: Callable[[PredictionSet], float],
    preds: PredictionSet,
    n_resamples: int = 1000,
    frac: float = 0.6,
    quantiles: Sequence[float] = (0.25, 0.75),
    seed: int = 0,
    replace: bool = False,
) -> tuple[float, float]:
    dist = bootstrap_distribution(metric, preds, n_resamples, frac, seed, replace)
    return interval_from(dist.values, quantiles)


# -- Mann-Whitney U ------------------------------------------------------------


@dataclass(frozen=True)
class MannWhitneyResult:
    statistic: float  # U for sample_a
    pvalue: float
    method: str

    def __iter__(self):
        return iter((self.statistic, self.pvalue))


def _exact_pvalue(ranks: np.ndarray, n1: int) -> float:
    n = len(ranks)
    doubled = np.rint(2.0 * ranks).astype(np.int64)
    counts = kernels.rank_sum_null_counts(doubled, n1)
    centre = n1 * (n + 1)  # doubled expected rank sum
    observed = int(doubled[:n1].sum())
    dev = abs(observed - centre)
    sums = np.arange(len(counts))
    extreme = counts[np.abs(sums - centre) >= dev].sum()
    return min(1.0, int(extreme) / math.comb(n, n1))


def mann_whitney_u(sample_a, sample_b, method: str = "auto") -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test with midranks for ties.

    ``method="auto"`` enumerates the exact permutation distribution of the
    rank sum (ties included) when both samples have at most 20 values and
    otherwise uses the tie-corrected normal approximation with continuity
    correction.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptyInputError("both samples must be non-empty")
    n1, n2 = a.size, b.size
    n = n1 + n2
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        raise DegenerateVarianceError("all observations are identical")
    ranks = rankdata(pooled, method="average")
    u = float(ranks[:n1].sum() - n1 * (n1 + 1) / 2.0)

    if method == "auto":
        method = "exact" if max(n1, n2) <= EXACT_MAX_N else "normal"
    if method == "exact":
        return MannWhitneyResult(u, _exact_pvalue(ranks, n1), "exact")
    if method != "normal":
        raise ValueError(f"unknown method {method!r}")

    _, tie_counts = np.unique(pooled, return_counts=True)
    tie_term = float(np.sum(tie_counts**3 - tie_counts)) / (n * (n - 1))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    mean = n1 * n2 / 2.0
    z = max(abs(u - mean) - 0.5, 0.0) / math.sqrt(var)
    p = math.erfc(z / math.sqrt(2.0))
    return MannWhitneyResult(u, min(1.0, p), "normal")


# -- error worksheet ---------------------------------------------------------

WORKSHEET_COLUMNS = (
    "sample_id",
    "dataset_id",
    "icdr_ref",
    "grade_pred",
    "image_path",
    "reviewer_gradable",
    "reviewer_comorbidity",
    "reviewer_regrade",
)


def flag_extreme_errors(preds: PredictionSet, threshold: int = 3) -> list[dict]:
    """Review rows for samples whose predicted grade is ``threshold`` or
    more steps from the reference. Reviewer columns start empty."""
    rows = []
    for i in range(len(preds)):
        if abs(int(preds.grade_pred[i]) - int(preds.icdr_ref[i])) >= threshold:
            rows.append(
                {
                    "sample_id": preds.sample_ids[i],
                    "dataset_id": preds.dataset_ids[i],
                    "icdr_ref": int(preds.icdr_ref[i]),
                    "grade_pred": int(preds.grade_pred[i]),
                    "image_path": preds.image_paths[i] if preds.image_paths else "",
                    "reviewer_gradable": "",
                    "reviewer_comorbidity": "",
                    "reviewer_regrade": "",
                }
            )
    return rows


# -- report -------------------------------------------------------------------


@dataclass
class EvaluationReport:
    n_samples: int
    confusion: np.ndarray
    mc_acc: float
    lw_kappa: Optional[float]
    mse: float
    mae: float
    rdr_auc: Optional[float]
    rdr_f1: float
    rdr_acc: float
    intervals: dict = field(default_factory=dict)
    significance: Optional[dict] = None
    flags: list = field(default_factory=list)
    resamples: dict = field(default_factory=dict)
    sample_ids: tuple = ()
    options: dict = field(default_factory=dict)

    def metric_values(self) -> dict:
        return {name: getattr(self, name) for name in METRICS}

    @property
    def bootstrapped(self) -> bool:
        return self.options.get("n_bootstrap", 0) > 0

    def to_dict(self) -> dict:
        d = {
            "n_samples": self.n_samples,
            "metrics": self.metric_values(),
            "significance": self.significance,
            "confusion": self.confusion.tolist(),
            "n_flags": len(self.flags),
            "sample_ids": list(self.sample_ids),
            "options": self.options,
        }
        if self.bootstrapped:
            d["intervals"] = {k: list(v) for k, v in self.intervals.items()}
        return d


def evaluate(
    preds: PredictionSet,
    n_bootstrap: int = 1000,
    frac: float = 0.6,
    quantiles: Sequence[float] = (0.25, 0.75),
    seed: int = 0,
    replace: bool = False,
    discrete_errors: bool = False,
    flag_threshold: int = 3,
) -> EvaluationReport:
    """Point estimates, bootstrap bands and flags for one prediction set.

    Metrics that are undefined on the full set (kappa or AUC with a
    degenerate reference) are reported as ``None`` and get no interval.
    """
    _nonempty(preds)
    fns = dict(METRICS)
    fns["mse"] = lambda p: mse(p, discrete_errors)
    fns["mae"] = lambda p: mae(p, discrete_errors)

    values = {}
    for name, fn in fns.items():
        try:
            values[name] = fn(preds)
        except UndefinedMetricError:
            values[name] = None

    intervals, resamples = {}, {}
    if n_bootstrap > 0:
        defined = {name: fn for name, fn in fns.items() if values[name] is not None}
        dists = bootstrap_distributions(defined, preds, n_bootstrap, frac, seed, replace)
        for name, dist in dists.items():
            resamples[name] = dist.values
            # too many undefined resamples: keep the audit trail, omit the band
            if dist.skipped <= 0.10 * n_bootstrap:
                intervals[name] = interval_from(dist.values, quantiles)

    return EvaluationReport(
        n_samples=len(preds),
        confusion=confusion_matrix(preds),
        intervals=intervals,
        flags=flag_extreme_errors(preds, flag_threshold),
        resamples=resamples,
        sample_ids=preds.sample_ids,
        options={
            "n_bootstrap": n_bootstrap,
            "frac": frac,
            "quantiles": list(quantiles),
            "seed": seed,
            "replace": replace,
            "discrete_errors": discrete_errors,
        },
        **values,
    )


def compare_resample_sets(a: dict, b: dict) -> dict:
    """Mann-Whitney U per metric on two ``{metric: values}`` mappings.

    NaN entries (skipped resamples) are dropped; metrics missing on either
    side or with no spread at all are left out of the result.
    """
    out = {}
    for name in METRICS:
        if name not in a or name not in b:
            continue
        va, vb = np.asarray(a[name], dtype=np.float64), np.asarray(b[name], dtype=np.float64)
        va, vb = va[~np.isnan(va)], vb[~np.isnan(vb)]
        try:
            res = mann_whitney_u(va, vb)
        except (DegenerateVarianceError, EmptyInputError):
            continue
        out[name] = {"U": res.statistic, "p_value": res.pvalue, "method": res.method}
    return out


def compare_resamples(report_a: EvaluationReport, report_b: EvaluationReport) -> dict:
    """Mann-Whitney U on the bootstrap metric distributions of two models."""
    return compare_resample_sets(report_a.resamples, report_b.resamples)


def read_resamples(path) -> dict[str, np.ndarray]:
    """Inverse of the ``resamples.csv`` writer; blanks become NaN."""
    rows: dict[str, dict[int, float]] = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            v = row["value"]
            rows.setdefault(row["metric"], {})[int(row["resample"])] = float(v) if v != "" else np.nan
    return {name: np.array([d[i] for i in sorted(d)]) for name, d in rows.items()}


def write_report(report: EvaluationReport, out_dir) -> dict[str, Path]:
    """Write ``report.json``, ``metrics.csv``, ``confusion.csv``,
    ``flags.csv`` and ``resamples.csv`` into ``out_dir``.

    Interval columns appear in ``metrics.csv`` only for bootstrapped runs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": out / "report.json",
        "metrics": out / "metrics.csv",
        "confusion": out / "confusion.csv",
        "flags": out / "flags.csv",
        "resamples": out / "resamples.csv",
    }
    paths["report"].write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    with paths["metrics"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value", "lower", "upper"] if report.bootstrapped else ["metric", "value"])
        for name, value in report.metric_values().items():
            row = [name, "" if value is None else repr(float(value))]
            if report.bootstrapped:
                lo_hi = report.intervals.get(name)
                row += [repr(lo_hi[0]), repr(lo_hi[1])] if lo_hi else ["", ""]
            w.writerow(row)
    with paths["confusion"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["icdr_ref"] + [f"pred_{j}" for j in range(N_GRADES)])
        for i, row in enumerate(report.confusion):
            w.writerow([i] + [int(v) for v in row])
    with paths["flags"].open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=WORKSHEET_COLUMNS)
        w.writeheader()
        w.writerows(report.flags)
    with paths["resamples"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["resample", "metric", "value"])
        for name, vals in report.resamples.items():
            for i, v in enumerate(vals):
                w.writerow([i, name, "" if np.isnan(v) else repr(float(v))])
    return paths
