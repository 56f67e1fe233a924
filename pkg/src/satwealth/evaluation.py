"""Evaluation protocols: squared correlation, leave-one-country-out CV,
percentile-thresholded curves and pooled / block / out-of-country regimes.

Undefined r² values (a zero-variance vector) raise :class:`UndefinedMetric`
from :func:`r_squared`; aggregate helpers record them as ``None`` and
reports render them as ``n/a``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._io import atomic_write
from .errors import (
    EmptySubset,
    LengthMismatch,
    MissingNightlightPredictions,
    TooFewGroups,
    TooFewRows,
    UndefinedMetric,
    ValidationError,
)
from .heads import DesignMatrix, GBTParams, gbt_fit, kfold_indices, ridge_fit, ridge_fit_cv

REGIMES = ("OOC", "POOLED", "BLOCK_CV_POOLED", "NIGHTLIGHT_GBT", "NIGHTLIGHT_RIDGE")
HEADS = ("ridge", "gbt")
ALL_COUNTRIES = "All Countries"
DEFAULT_FOLDS = 5


@dataclass
class Prediction:
    cluster_id: str
    country: str
    y_true: float
    y_pred: float
    y_nightlight_pred: float | None = None


@dataclass
class EvalReport:
    per_country: dict = field(default_factory=dict)
    mean_train_r2: float | None = None
    mean_test_r2: float | None = None
    aggregate_residual_r2: float | None = None
    pooled_test_r2: float | None = None
    percentile_curves: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_country": {c: {"train_r2": tr, "test_r2": te} for c, (tr, te) in sorted(self.per_country.items())},
            "mean_train_r2": self.mean_train_r2,
            "mean_test_r2": self.mean_test_r2,
            "aggregate_residual_r2": self.aggregate_residual_r2,
            "pooled_test_r2": self.pooled_test_r2,
            "percentile_curves": {k: [[p, r] for p, r in v] for k, v in sorted(self.percentile_curves.items())},
        }


def r_squared(y_true, y_pred) -> float:
    """Squared Pearson correlation; raises UndefinedMetric on zero variance."""
    a = np.asarray(y_true, dtype=np.float64)
    b = np.asarray(y_pred, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch(f"r_squared needs two equal-length vectors, got {a.shape} and {b.shape}")
    if len(a) < 2:
        raise LengthMismatch("r_squared needs at least 2 points")
    # compare to the first entry: a.mean() of a constant vector can be off by one ulp
    if (a == a[0]).all() or (b == b[0]).all():
        raise UndefinedMetric("r² undefined for a zero-variance vector")
    da = a - a.mean()
    db = b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0.0 or sbb == 0.0:
        raise UndefinedMetric("r² undefined for a zero-variance vector")
    r = float(da @ db) / math.sqrt(saa * sbb)
    r = min(1.0, max(-1.0, r))
    return r * r


def r_squared_or_none(y_true, y_pred):
    try:
        return r_squared(y_true, y_pred)
    except UndefinedMetric:
        return None


def _mean_defined(values):
    vals = [v for v in values if v is not None]
    return sum(vals) / len(vals) if vals else None


def fit_head(head: str, X, y, params: dict | None = None, seed=0):
    """Fit ``ridge`` (fixed ``lambda`` or CV-selected) or ``gbt``; returns an object with ``predict``."""
    params = dict(params or {})
    if head == "ridge":
        if params.get("lambda") is not None:
            return ridge_fit(X, y, float(params["lambda"]))
        kwargs = {k: params[k] for k in ("lambdas", "folds") if k in params}
        return ridge_fit_cv(X, y, seed=seed, **kwargs)
    if head == "gbt":
        return gbt_fit(X, y, GBTParams(**{k: params[k] for k in GBTParams.__dataclass_fields__ if k in params}))
    raise ValidationError(f"unknown head {head!r}; expected one of {HEADS}")


def loco_cv(data: DesignMatrix, head: str = "ridge", head_params: dict | None = None, seed=0,
            nightlight_preds: dict | None = None):
    """Leave-one-country-out CV.

    Returns ``(predictions, report)``; exactly one prediction per input row,
    each made by a model that never saw that row's country. When
    ``nightlight_preds`` (cluster id -> prediction) is given, the predictions
    carry it and the report includes the aggregate residual r².
    """
    countries = sorted(set(data.groups.tolist()))
    if len(countries) < 2:
        raise TooFewGroups(f"leave-one-country-out needs >= 2 countries, got {len(countries)}")
    for c in countries:
        if (data.groups == c).sum() < 2:
            raise TooFewGroups(f"country {c} has fewer than 2 rows")
    pred = np.empty(len(data))
    report = EvalReport()
    for c in countries:
        test = data.groups == c
        train = ~test
        model = fit_head(head, data.rows[train], data.targets[train], head_params, seed)
        fitted = model.predict(data.rows[train])
        pred[test] = model.predict(data.rows[test])
        report.per_country[c] = (r_squared_or_none(data.targets[train], fitted),
                                 r_squared_or_none(data.targets[test], pred[test]))
    report.mean_train_r2 = _mean_defined(tr for tr, _ in report.per_country.values())
    report.mean_test_r2 = _mean_defined(te for _, te in report.per_country.values())
    report.pooled_test_r2 = r_squared_or_none(data.targets, pred)
    preds = [
        Prediction(str(cid), str(g), float(t), float(p),
                   None if nightlight_preds is None else float(nightlight_preds[str(cid)]))
        for cid, g, t, p in zip(data.ids, data.groups, data.targets, pred)
    ]
    if nightlight_preds is not None:
        report.aggregate_residual_r2 = _residual_or_none(preds)
    return preds, report


def residual_r2(preds: Sequence[Prediction]) -> float:
    """Squared correlation of nightlight-model residuals with this model's residuals, pooled."""
    if any(p.y_nightlight_pred is None for p in preds):
        raise MissingNightlightPredictions("every prediction needs y_nightlight_pred")
    y = np.array([p.y_true for p in preds])
    nl = np.array([p.y_nightlight_pred for p in preds])
    model = np.array([p.y_pred for p in preds])
    return r_squared(y - nl, y - model)


def _residual_or_none(preds):
    try:
        return residual_r2(preds)
    except UndefinedMetric:
        return None


def quantile_threshold(values, p: float) -> float:
    """Inclusive nearest-rank empirical quantile."""
    if not 0 < p <= 1:
        raise ValidationError(f"percentile must be in (0, 1], got {p}")
    v = np.sort(np.asarray(values, dtype=np.float64))
    if len(v) == 0:
        raise EmptySubset("no values to threshold")
    rank = max(1, math.ceil(p * len(v) - 1e-9))
    return float(v[rank - 1])


def percentile_filtered_eval(preds: Sequence[Prediction], p: float, country: str | None = None) -> float:
    """r² on the predictions whose true wealth is at or below the p-quantile of the evaluated set.

    ``country=None`` pools all countries.
    """
    subset = [x for x in preds if country is None or x.country == country]
    if not subset:
        raise EmptySubset(f"no predictions for country {country}")
    y = np.array([x.y_true for x in subset])
    yp = np.array([x.y_pred for x in subset])
    keep = y <= quantile_threshold(y, p)
    if keep.sum() < 2:
        raise EmptySubset(f"fewer than 2 points at or below the {p} quantile")
    return r_squared(y[keep], yp[keep])


def percentile_curves(preds: Sequence[Prediction], percentiles: Sequence[float]) -> dict:
    """Per-country and pooled test-set curves ``{name: [(p, r2 or None), ...]}``."""
    curves = {}
    for country in sorted({x.country for x in preds}) + [ALL_COUNTRIES]:
        key = None if country == ALL_COUNTRIES else country
        points = []
        for p in percentiles:
            try:
                points.append((float(p), percentile_filtered_eval(preds, p, key)))
            except (EmptySubset, UndefinedMetric):
                points.append((float(p), None))
        curves[country] = points
    return curves


def block_training_mask(locations, train_idx, test_idx, tile_extent_m: float) -> np.ndarray:
    """Boolean over ``train_idx``: True where the row's footprint overlaps no test footprint."""
    xy = np.asarray(locations, dtype=np.float64)
    keep = np.ones(len(train_idx), dtype=bool)
    if len(test_idx) == 0:
        return keep
    test_xy = xy[test_idx]
    for k, i in enumerate(train_idx):
        cheb = np.abs(test_xy - xy[i]).max(axis=1)
        keep[k] = not (cheb < tile_extent_m).any()
    return keep


def pooled_fold_plan(n: int, folds: int, seed, locations=None, tile_extent_m=None, block=False):
    """List of ``(train_idx, test_idx)`` pairs for country-agnostic k-fold CV."""
    parts = kfold_indices(n, folds, seed)
    plan = []
    for part in parts:
        train = np.setdiff1d(np.arange(n), part)
        if block:
            train = train[block_training_mask(locations, train, part, tile_extent_m)]
        plan.append((train, part))
    return plan


def _cv_predict(rows, targets, plan, head, head_params, seed):
    pred = np.empty(len(targets))
    for train, test in plan:
        if len(train) < 2:
            raise TooFewRows("a training fold has fewer than 2 rows")
        model = fit_head(head, rows[train], targets[train], head_params, seed)
        pred[test] = model.predict(rows[test])
    return pred


def pooled_percentile_train_eval(data: DesignMatrix, head: str, regime: str, p: float,
                                 folds: int = DEFAULT_FOLDS, seed=0, head_params: dict | None = None,
                                 tile_extent_m: float = 960.0) -> float:
    """Cross-validated r² after discarding every row above the global p-quantile of wealth."""
    if regime not in REGIMES:
        raise ValidationError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    keep = data.targets <= quantile_threshold(data.targets, p)
    if keep.sum() < 2:
        raise EmptySubset(f"fewer than 2 rows at or below the {p} quantile")
    sub = data.subset(keep)
    n = len(sub)

    if regime == "OOC":
        counts = {c: int((sub.groups == c).sum()) for c in set(sub.groups.tolist())}
        sub = sub.subset(np.array([counts[g] >= 2 for g in sub.groups]))
        preds, _ = loco_cv(sub, head, head_params, seed)
        return r_squared(np.array([x.y_true for x in preds]), np.array([x.y_pred for x in preds]))

    if n < max(folds, 4):
        raise TooFewRows(f"{n} rows left for {folds}-fold CV")
    rows, fit_as = sub.rows, head
    if regime.startswith("NIGHTLIGHT"):
        if sub.nightlights is None:
            raise ValidationError("nightlight regimes need a nightlights column")
        rows = np.asarray(sub.nightlights, dtype=np.float64)[:, None]
        fit_as = "gbt" if regime == "NIGHTLIGHT_GBT" else "ridge"
        head_params = None
    block = regime == "BLOCK_CV_POOLED"
    if block and sub.locations is None:
        raise ValidationError("block CV needs sample locations")
    plan = pooled_fold_plan(n, folds, seed, sub.locations, tile_extent_m, block)
    pred = _cv_predict(rows, sub.targets, plan, fit_as, head_params, seed)
    return r_squared(sub.targets, pred)


def regime_curves(data: DesignMatrix, head: str, regimes: Sequence[str], percentiles: Sequence[float],
                  folds: int = DEFAULT_FOLDS, seed=0, head_params=None, tile_extent_m=960.0) -> dict:
    curves = {}
    for regime in regimes:
        points = []
        for p in percentiles:
            try:
                r2 = pooled_percentile_train_eval(data, head, regime, p, folds, seed, head_params, tile_extent_m)
            except (EmptySubset, TooFewRows, TooFewGroups, UndefinedMetric):
                r2 = None
            points.append((float(p), r2))
        curves[regime] = points
    return curves


# output files -----------------------------------------------------------

def fmt_r2(value) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def write_predictions_csv(path, preds: Sequence[Prediction]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["cluster_id", "country", "y_true", "y_pred", "y_nightlight_pred"])
    for x in preds:
        w.writerow([x.cluster_id, x.country, repr(x.y_true), repr(x.y_pred),
                    "" if x.y_nightlight_pred is None else repr(x.y_nightlight_pred)])
    return atomic_write(path, buf.getvalue())


def read_predictions_csv(path) -> list[Prediction]:
    with open(path, newline="") as fh:
        return [
            Prediction(r["cluster_id"], r["country"], float(r["y_true"]), float(r["y_pred"]),
                       float(r["y_nightlight_pred"]) if r["y_nightlight_pred"] else None)
            for r in csv.DictReader(fh)
        ]


def write_curves_csv(path, curves: dict):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["regime", "percentile", "r2"])
    for name in curves:
        for p, r2 in curves[name]:
            w.writerow([name, repr(p), "n/a" if r2 is None else repr(r2)])
    return atomic_write(path, buf.getvalue())


def render_table(rows: Sequence[tuple[str, EvalReport]]) -> str:
    """Plain-text table: model, mean train r², mean test r², aggregate residual r²."""
    header = f"{'Model':<32} {'Mean Train r2':>14} {'Mean Test r2':>13} {'Aggregate Residual r2':>22}"
    lines = [header, "-" * len(header)]
    for name, rep in rows:
        lines.append(f"{name:<32} {fmt_r2(rep.mean_train_r2):>14} {fmt_r2(rep.mean_test_r2):>13} "
                     f"{fmt_r2(rep.aggregate_residual_r2):>22}")
    return "\n".join(lines) + "\n"
