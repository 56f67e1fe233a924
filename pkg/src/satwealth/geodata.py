"""Survey records, nightlight labels, location sampling and spatial splits."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from ._io import atomic_write
from .errors import InvalidFractions, InvalidThresholds, MissingInputError, PoolExhausted, ValidationError

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (3.0, 35.0)
SPLIT_NAMES = ("train", "val", "test")
SURVEY_HEADER = ["cluster_id", "country", "easting", "northing", "awi", "year"]
NIGHTLIGHT_HEADER = ["easting", "northing", "intensity"]


@dataclass(frozen=True)
class SurveyRecord:
    cluster_id: str
    country: str
    location: tuple[float, float]
    awi: float
    year: int

    def __post_init__(self):
        if not math.isfinite(self.awi):
            raise ValidationError(f"cluster {self.cluster_id}: non-finite AWI")


@dataclass(frozen=True)
class NightlightSample:
    location: tuple[float, float]
    intensity: float
    label: int


@dataclass
class SplitAssignment:
    train: set
    val: set
    test: set
    tile_extent_m: float
    achieved: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def split_of(self, sample_id) -> str:
        for name in SPLIT_NAMES:
            if sample_id in getattr(self, name):
                return name
        raise KeyError(sample_id)

    def as_mapping(self) -> dict:
        return {sid: name for name in SPLIT_NAMES for sid in getattr(self, name)}


def check_thresholds(thresholds: Sequence[float]) -> tuple[float, float]:
    t1, t2 = (float(t) for t in thresholds)
    if not (0 <= t1 < t2):
        raise InvalidThresholds(f"thresholds must satisfy 0 <= t1 < t2, got ({t1}, {t2})")
    return t1, t2


def bin_intensity(intensity, thresholds=DEFAULT_THRESHOLDS):
    """Class 0/1/2 for low/medium/high brightness; bins are left-closed.

    Works on scalars and arrays alike.
    """
    t1, t2 = check_thresholds(thresholds)
    x = np.asarray(intensity, dtype=np.float64)
    labels = np.where(x < t1, 0, np.where(x < t2, 1, 2))
    return int(labels) if labels.ndim == 0 else labels.astype(np.int64)


def nightlight_samples(locations, intensities, thresholds=DEFAULT_THRESHOLDS) -> list[NightlightSample]:
    labels = bin_intensity(np.asarray(intensities, dtype=np.float64), thresholds)
    return [
        NightlightSample((float(e), float(n)), float(v), int(c))
        for (e, n), v, c in zip(locations, intensities, labels)
    ]


def location_weights(survey_locations, pool, density_sigma: float) -> np.ndarray:
    """``1 + sum_s exp(-|p - s|^2 / (2 sigma^2))`` for every pool point ``p``."""
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, 2)
    sites = np.asarray(survey_locations, dtype=np.float64).reshape(-1, 2)
    weights = np.ones(len(pool))
    if len(sites) == 0:
        return weights
    if density_sigma <= 0:
        raise ValidationError("density_sigma must be positive")
    # chunked so large pools do not allocate pool x sites at once
    for start in range(0, len(pool), 4096):
        chunk = pool[start: start + 4096]
        d2 = ((chunk[:, None, :] - sites[None, :, :]) ** 2).sum(axis=-1)
        weights[start: start + 4096] += np.exp(-d2 / (2.0 * density_sigma ** 2)).sum(axis=1)
    return weights


def sample_indices(survey: Sequence[SurveyRecord], pool, density_sigma: float, n: int, seed) -> np.ndarray:
    """Indices of ``n`` pool points drawn without replacement, denser near survey sites."""
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, 2)
    if len(pool) == 0:
        raise PoolExhausted("candidate pool is empty")
    if n > len(pool):
        raise PoolExhausted(f"requested {n} locations from a pool of {len(pool)}")
    weights = location_weights([s.location for s in survey], pool, density_sigma)
    rng = np.random.default_rng(seed)
    return rng.choice(len(pool), size=n, replace=False, p=weights / weights.sum())


def sample_locations(survey, pool, density_sigma: float, n: int, seed) -> list[tuple[float, float]]:
    pool = np.asarray(pool, dtype=np.float64).reshape(-1, 2)
    idx = sample_indices(survey, pool, density_sigma, n, seed)
    return [(float(pool[i, 0]), float(pool[i, 1])) for i in idx]


def overlap_components(locations, tile_extent_m: float) -> np.ndarray:
    """Component label per sample; two samples are linked when their footprints overlap.

    Square footprints of side ``tile_extent_m`` overlap iff the Chebyshev
    distance between centres is strictly less than the side.
    """
    xy = np.asarray(locations, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        return np.zeros(0, dtype=np.int64)
    tree = cKDTree(xy)
    pairs = tree.query_pairs(tile_extent_m, p=np.inf, output_type="ndarray")
    if len(pairs):
        cheb = np.abs(xy[pairs[:, 0]] - xy[pairs[:, 1]]).max(axis=1)
        pairs = pairs[cheb < tile_extent_m]
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(xy), len(xy)))
    _, labels = connected_components(graph, directed=False)
    return labels


def assign_splits(sample_ids: Sequence, locations, fractions=(0.7, 0.15, 0.15),
                  tile_extent_m: float = 960.0, seed=0) -> SplitAssignment:
    """Assign whole overlap components to train/val/test.

    Components are visited largest first (seeded shuffle breaks size ties) and
    each goes to the split furthest below its target count. This keeps every
    cross-split pair of footprints disjoint by construction.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise InvalidFractions(f"fractions must be three positive numbers summing to 1, got {fractions}")
    ids = list(sample_ids)
    if len(ids) != len(set(ids)):
        raise ValidationError("sample ids must be unique")
    labels = overlap_components(locations, tile_extent_m)
    if len(labels) != len(ids):
        raise ValidationError("one location per sample id required")
    n = len(ids)

    rng = np.random.default_rng(seed)
    n_comp = int(labels.max()) + 1 if n else 0
    members = [[] for _ in range(n_comp)]
    for i, c in enumerate(labels):
        members[c].append(i)
    order = rng.permutation(n_comp)
    order = sorted(order, key=lambda c: -len(members[c]))

    warnings = []
    largest = max((len(m) for m in members), default=0)
    if n and largest > max(fractions) * n:
        warnings.append(f"largest overlap component holds {largest} of {n} samples; "
                        "target fractions cannot be met")

    targets = np.array(fractions) * n
    counts = np.zeros(3)
    out = [set(), set(), set()]
    for c in order:
        deficit = (targets - counts) / targets
        k = int(np.argmax(deficit))
        out[k].update(ids[i] for i in members[c])
        counts[k] += len(members[c])

    achieved = {name: (counts[k] / n if n else 0.0) for k, name in enumerate(SPLIT_NAMES)}
    for msg in warnings:
        log.warning("%s (achieved %s)", msg, achieved)
    return SplitAssignment(out[0], out[1], out[2], tile_extent_m, achieved, warnings)


def cross_split_overlaps(assignment: SplitAssignment, locations: dict) -> list[tuple]:
    """Exhaustive list of sample pairs in different splits whose footprints overlap."""
    split = assignment.as_mapping()
    ids = list(split)
    xy = np.array([locations[i] for i in ids], dtype=np.float64).reshape(-1, 2)
    names = np.array([split[i] for i in ids])
    bad = []
    for a in range(len(ids)):
        cheb = np.abs(xy[a + 1:] - xy[a]).max(axis=1) if a + 1 < len(ids) else np.zeros(0)
        hits = np.nonzero((cheb < assignment.tile_extent_m) & (names[a + 1:] != names[a]))[0]
        bad.extend((ids[a], ids[a + 1 + h]) for h in hits)
    return bad


# CSV and manifest I/O ---------------------------------------------------

def _rows(path, header):
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or list(reader.fieldnames)[: len(header)] != header:
                raise ValidationError(f"{path}: expected header {','.join(header)}")
            return list(reader)
    except FileNotFoundError:
        raise MissingInputError(f"missing file {path}") from None


def read_survey_csv(path) -> list[SurveyRecord]:
    records = [
        SurveyRecord(r["cluster_id"], r["country"], (float(r["easting"]), float(r["northing"])),
                     float(r["awi"]), int(r["year"]))
        for r in _rows(path, SURVEY_HEADER)
    ]
    ids = [r.cluster_id for r in records]
    if len(ids) != len(set(ids)):
        raise ValidationError(f"{path}: duplicate cluster_id")
    return records


def write_survey_csv(path, records: Iterable[SurveyRecord]):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SURVEY_HEADER)
    for r in records:
        w.writerow([r.cluster_id, r.country, repr(r.location[0]), repr(r.location[1]), repr(r.awi), r.year])
    return atomic_write(path, buf.getvalue())


def read_nightlight_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(locations [n, 2], intensities [n])``."""
    rows = _rows(path, NIGHTLIGHT_HEADER)
    xy = np.array([[float(r["easting"]), float(r["northing"])] for r in rows]).reshape(-1, 2)
    v = np.array([float(r["intensity"]) for r in rows])
    if (v < 0).any():
        raise ValidationError(f"{path}: negative nightlight intensity")
    return xy, v


def write_nightlight_csv(path, locations, intensities):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(NIGHTLIGHT_HEADER)
    for (e, n), v in zip(locations, intensities):
        w.writerow([repr(float(e)), repr(float(n)), repr(float(v))])
    return atomic_write(path, buf.getvalue())
