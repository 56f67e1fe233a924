"""Pipeline stages. Each reads its inputs from the workdir, verifies them
against the producing stage's manifest, writes outputs atomically and
records a manifest of its own.

Order: synth -> composite -> sample -> pretrain -> extract -> evaluate.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .. import evaluation, geodata, raster
from .._io import atomic_write, dump_json
from ..errors import MissingInputError, SatwealthError, ValidationError
from ..heads import DesignMatrix
from ..nn import Checkpoint, ModelSpec, TrainConfig, build_model, extract_features, pretrain
from ..nn.train import accuracy
from . import synth as synthmod
from .config import PipelineConfig
from .manifest import stage_seed, verify_inputs, write_manifest

log = logging.getLogger(__name__)

STAGES = ("synth", "composite", "sample", "pretrain", "extract", "evaluate")
TILE_INDEX_HEADER = ["tile_id", "origin_easting", "origin_northing", "extent_m", "valid_fraction"]
SAMPLE_HEADER = ["tile_id", "easting", "northing", "intensity", "label", "split"]
SELECTION = {"RGB": "rgb", "ALL9": "all"}


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read_csv(path, header):
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing file {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames)[: len(header)] != header:
            raise ValidationError(f"{path}: expected header {','.join(header)}")
        return list(reader)


def _tile_paths(stem: Path):
    return list(raster.tile_files(stem))


def tile_centre(origin, extent_m):
    return (origin[0] + extent_m / 2.0, origin[1] - extent_m / 2.0)


def nearest_within(points, ref_xy, ref_values, radius):
    """Value of the nearest reference point within Chebyshev ``radius``; NaN if none."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.full(len(points), np.nan)
    if len(ref_xy) == 0 or len(points) == 0:
        return out
    dist, idx = cKDTree(ref_xy).query(points, k=1, p=np.inf)
    hit = dist <= radius
    out[hit] = np.asarray(ref_values, dtype=np.float64)[idx[hit]]
    return out


class _Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


# synth ------------------------------------------------------------------

def cmd_synth(cfg: PipelineConfig) -> dict:
    out = cfg.stage_dir("synth")
    seed = stage_seed(cfg.seed, "synth")
    with _Timer() as t:
        if cfg.synth_variant == "idiosyncratic":
            written, summary = _synth_features(cfg, out, seed)
        else:
            written, summary = _synth_imagery(cfg, out, seed)
    return write_manifest(cfg, "synth", [], written, summary, t.elapsed)


def _synth_params(cfg):
    return synthmod.SynthParams(
        n_countries=cfg.synth_countries, grid_side=cfg.synth_grid_side, spacing_m=cfg.synth_spacing_m,
        n_observations=cfg.synth_observations, cloud_probability=cfg.synth_cloud_probability,
        noise_sigma=cfg.synth_noise_sigma, nightlight_noise=cfg.synth_nightlight_noise,
        clusters_per_country=cfg.synth_clusters_per_country)


def _synth_imagery(cfg, out, seed):
    params = _synth_params(cfg)
    sites, stacks, (centres, intensity), surveys, truth = synthmod.generate(params, seed)
    written = []
    for (tile_id, _, _), stack in zip(sites, stacks):
        written += raster.write_stack(out / "stacks" / tile_id, stack)
    written.append(geodata.write_survey_csv(out / "surveys.csv", surveys))
    written.append(geodata.write_nightlight_csv(out / "nightlights.csv", centres, intensity))
    labels = geodata.bin_intensity(intensity, cfg.thresholds)
    hist = np.bincount(labels, minlength=3) / len(labels)
    bundle = dict(truth, variant="imagery", tiles=[[tid, list(c), int(k)] for tid, c, k in sites],
                  class_fractions=[float(h) for h in hist])
    written.append(dump_json(out / "bundle.json", bundle))
    summary = {"tiles": len(sites), "surveys": len(surveys), "class_fractions": bundle["class_fractions"]}
    return written, summary


def _synth_features(cfg, out, seed):
    X, awi, countries, ids, locs, nls = synthmod.idiosyncratic_design(
        seed, n_countries=cfg.synth_countries, per_country=cfg.synth_clusters_per_country,
        spacing_m=cfg.synth_spacing_m)
    surveys = [geodata.SurveyRecord(str(i), str(c), (float(e), float(n)), float(a), 2010)
               for i, c, (e, n), a in zip(ids, countries, locs, awi)]
    written = [
        geodata.write_survey_csv(out / "surveys.csv", surveys),
        geodata.write_nightlight_csv(out / "nightlights.csv", locs, nls),
        write_features_csv(out / "features.csv", ids, X),
    ]
    bundle = {"variant": "idiosyncratic", "seed": int(seed), "n_features": int(X.shape[1]),
              "awi": "rotated per-country linear map of the signal columns plus a country offset "
                     "encoded by signature columns, noise sd 0.1"}
    written.append(dump_json(out / "bundle.json", bundle))
    return written, {"surveys": len(surveys), "features": int(X.shape[1])}


# composite --------------------------------------------------------------

def find_stacks(rasters_dir: Path) -> list[Path]:
    if not rasters_dir.is_dir():
        raise MissingInputError(f"raster directory {rasters_dir} not found")
    stacks = sorted(p.parent for p in rasters_dir.glob("*/stack.json"))
    if not stacks:
        raise MissingInputError(f"no observation stacks under {rasters_dir}")
    return stacks


def cmd_composite(cfg: PipelineConfig) -> dict:
    stacks = find_stacks(cfg.path("rasters"))
    inputs = [f for d in stacks for f in sorted(d.iterdir()) if f.is_file()]
    verify_inputs(inputs, cfg.root)
    out = cfg.stage_dir("composite")
    written, index = [], []
    with _Timer() as t:
        for d in stacks:
            tile_id = d.name
            try:
                stack = raster.read_stack(d)
                native = raster.median_composite(stack)
                sharp = raster.sharpen_tile(native)
            except SatwealthError as exc:
                raise type(exc)(f"tile {tile_id}: {exc}") from exc
            written += raster.write_tile(out / "native" / tile_id, native)
            written += raster.write_tile(out / "sharpened" / tile_id, sharp)
            index.append([tile_id, repr(float(sharp.origin[0])), repr(float(sharp.origin[1])),
                          repr(float(sharp.extent_m)), repr(sharp.valid_fraction())])
        written.append(atomic_write(out / "tiles.csv", _csv_text(TILE_INDEX_HEADER, index)))
    fractions = [float(r[4]) for r in index]
    summary = {"tiles": len(index), "min_valid_fraction": min(fractions)}
    return write_manifest(cfg, "composite", inputs, written, summary, t.elapsed)


def read_tile_index(cfg) -> list[dict]:
    rows = _read_csv(cfg.stage_dir("composite") / "tiles.csv", TILE_INDEX_HEADER)
    for r in rows:
        r["origin"] = (float(r["origin_easting"]), float(r["origin_northing"]))
        r["extent_m"] = float(r["extent_m"])
        r["valid_fraction"] = float(r["valid_fraction"])
        r["centre"] = tile_centre(r["origin"], r["extent_m"])
    return rows


# sample -----------------------------------------------------------------

def cmd_sample(cfg: PipelineConfig) -> dict:
    thresholds = geodata.check_thresholds(cfg.thresholds)
    index_path = cfg.stage_dir("composite") / "tiles.csv"
    inputs = [index_path, cfg.path("surveys"), cfg.path("nightlights")]
    verify_inputs(inputs, cfg.root)
    with _Timer() as t:
        tiles = read_tile_index(cfg)
        surveys = geodata.read_survey_csv(cfg.path("surveys"))
        nl_xy, nl_v = geodata.read_nightlight_csv(cfg.path("nightlights"))
        centres = np.array([r["centre"] for r in tiles]).reshape(-1, 2)
        intensity = nearest_within(centres, nl_xy, nl_v, cfg.tile_extent_m / 2.0)
        usable = [i for i, r in enumerate(tiles)
                  if 1.0 - r["valid_fraction"] <= cfg.max_invalid_fraction and np.isfinite(intensity[i])]
        rejected = len(tiles) - len(usable)
        pool = centres[usable]
        n = min(cfg.sample_count, len(pool))
        chosen = sorted(usable[i] for i in
                        geodata.sample_indices(surveys, pool, cfg.density_sigma_m, n, stage_seed(cfg.seed, "sample")))
        ids = [tiles[i]["tile_id"] for i in chosen]
        labels = geodata.bin_intensity(intensity[chosen], thresholds)
        split = geodata.assign_splits(ids, centres[chosen], cfg.split_fractions, cfg.tile_extent_m,
                                      stage_seed(cfg.seed, "sample.split"))
        mapping = split.as_mapping()
        rows = [[tid, repr(float(centres[i, 0])), repr(float(centres[i, 1])), repr(float(intensity[i])),
                 int(lab), mapping[tid]] for tid, i, lab in zip(ids, chosen, labels)]
        hist = np.bincount(labels, minlength=3)
        summary = {
            "pool": len(usable), "rejected_tiles": rejected, "sampled": len(ids),
            "class_histogram": [int(h) for h in hist],
            "class_fractions": [float(h) / len(ids) for h in hist],
            "split_sizes": {name: len(getattr(split, name)) for name in geodata.SPLIT_NAMES},
            "split_fractions": split.achieved, "warnings": split.warnings,
        }
        out = cfg.stage_dir("sample")
        written = [atomic_write(out / "samples.csv", _csv_text(SAMPLE_HEADER, rows)),
                   dump_json(out / "splits.json", {"thresholds": list(thresholds), **summary,
                                                  "assignment": dict(sorted(mapping.items()))})]
    log.info("class histogram %s, splits %s", summary["class_histogram"], summary["split_sizes"])
    return write_manifest(cfg, "sample", inputs, written, summary, t.elapsed)


def read_samples(cfg) -> list[dict]:
    rows = _read_csv(cfg.stage_dir("sample") / "samples.csv", SAMPLE_HEADER)
    for r in rows:
        r["label"] = int(r["label"])
    return rows


# pretrain ---------------------------------------------------------------

def _load_tensors(cfg, tile_ids, selection, stats=None):
    tiles = [raster.read_tile(cfg.stage_dir("composite") / "sharpened" / tid) for tid in tile_ids]
    dilations = raster.channel_dilations(tiles[0], selection) if tiles else None
    x = np.stack([raster.stack_to_tensor(t, selection, stats, dtype=np.float64) for t in tiles])
    return x, dilations


def cmd_pretrain(cfg: PipelineConfig) -> dict:
    sample_csv = cfg.stage_dir("sample") / "samples.csv"
    verify_inputs([sample_csv], cfg.root)
    samples = read_samples(cfg)
    tile_inputs = [p for r in samples for p in _tile_paths(cfg.stage_dir("composite") / "sharpened" / r["tile_id"])]
    verify_inputs(tile_inputs, cfg.root)
    selection = SELECTION[cfg.band_mode]

    with _Timer() as t:
        parts = {name: [r for r in samples if r["split"] == name] for name in ("train", "val")}
        x_tr, dilations = _load_tensors(cfg, [r["tile_id"] for r in parts["train"]], selection)
        x_va, _ = _load_tensors(cfg, [r["tile_id"] for r in parts["val"]], selection)
        if len(x_tr) == 0 or len(x_va) == 0:
            raise ValidationError("train and val splits must both be non-empty")
        stats = raster.ChannelStats.from_tensors(x_tr)
        x_tr = np.stack([stats.apply(x) for x in x_tr]).astype(np.float32)
        x_va = np.stack([stats.apply(x) for x in x_va]).astype(np.float32)
        y_tr = np.array([r["label"] for r in parts["train"]])
        y_va = np.array([r["label"] for r in parts["val"]])

        train_cfg = TrainConfig(cfg.epochs, cfg.learning_rate, cfg.momentum, cfg.weight_decay,
                                cfg.batch_size, stage_seed(cfg.seed, "pretrain.shuffle"))
        spec = ModelSpec.default(cfg.architecture, cfg.band_mode, dilations, cfg.feature_dim)
        init_seed = stage_seed(cfg.seed, "pretrain.init")
        extra = {"selection": selection, "channel_stats": {"mean": list(stats.mean), "std": list(stats.std)}}

        rgb_weights = None
        if cfg.band_mode == "ALL9" and cfg.rgb_warmstart_epochs > 0:
            # warm-start the colour channels on an RGB-only model, then spread them to all nine
            rgb_spec = ModelSpec.default(cfg.architecture, "RGB", dilations[:3], cfg.feature_dim)
            rgb_model = build_model(rgb_spec, stage_seed(cfg.seed, "pretrain.rgb_init"), dtype=np.float32)
            rgb_cfg = TrainConfig(cfg.rgb_warmstart_epochs, cfg.learning_rate, cfg.momentum,
                                  cfg.weight_decay, cfg.batch_size, stage_seed(cfg.seed, "pretrain.rgb_shuffle"))
            rgb_ck = pretrain(rgb_model, (x_tr[:, :3], y_tr), (x_va[:, :3], y_va), rgb_cfg)
            rgb_weights = {"weight": rgb_model.first_conv.params["weight"],
                           "bias": rgb_model.first_conv.params.get("bias")}
            extra["rgb_warmstart"] = {"epoch": rgb_ck.epoch, "val_accuracy": rgb_ck.val_accuracy}

        model = build_model(spec, init_seed, pretrained_rgb=rgb_weights, dtype=np.float32)
        ck = pretrain(model, (x_tr, y_tr), (x_va, y_va), train_cfg)
        ck.seed = init_seed
        ck.extra = extra
        ck.extra["train_accuracy"] = accuracy(model, x_tr, y_tr)
        out = cfg.stage_dir("pretrain")
        written = [ck.save(out / "checkpoint.bin")]
    summary = {"epoch": ck.epoch, "val_accuracy": ck.val_accuracy, "train": len(y_tr), "val": len(y_va),
               "dilations": dilations}
    log.info("best epoch %d, val accuracy %.4f", ck.epoch, ck.val_accuracy)
    return write_manifest(cfg, "pretrain", [sample_csv] + tile_inputs, written, summary, t.elapsed)


# extract ----------------------------------------------------------------

def write_features_csv(path, ids, features):
    features = np.asarray(features)
    header = ["sample_id"] + [f"f{k}" for k in range(features.shape[1])]
    rows = ([cid] + [repr(float(v)) for v in row] for cid, row in zip(ids, features))
    return atomic_write(path, _csv_text(header, rows))


def read_features_csv(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"missing features file {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "sample_id":
            raise ValidationError(f"{path}: first column must be sample_id")
        return {row[0]: np.array([float(v) for v in row[1:]]) for row in reader}


def survey_tiles(surveys, tiles) -> tuple[list, list]:
    """Map each survey cluster to the composite tile whose footprint contains it."""
    found, missing = [], []
    for s in surveys:
        e, n = s.location
        hit = None
        for r in tiles:
            (x0, y0), ext = r["origin"], r["extent_m"]
            if x0 <= e < x0 + ext and y0 - ext < n <= y0:
                hit = r["tile_id"]
                break
        (found if hit else missing).append((s.cluster_id, hit))
    return found, [cid for cid, _ in missing]


def cmd_extract(cfg: PipelineConfig) -> dict:
    ckpt_path = cfg.stage_dir("pretrain") / "checkpoint.bin"
    index_path = cfg.stage_dir("composite") / "tiles.csv"
    base = [ckpt_path, index_path, cfg.path("surveys")]
    verify_inputs(base, cfg.root)
    surveys = geodata.read_survey_csv(cfg.path("surveys"))
    found, missing = survey_tiles(surveys, read_tile_index(cfg))
    if missing:
        raise MissingInputError(f"no composite tile for {len(missing)} survey cluster(s): {', '.join(missing)}")
    tile_inputs = sorted({p for _, tid in found for p in _tile_paths(cfg.stage_dir("composite") / "sharpened" / tid)})
    verify_inputs(tile_inputs, cfg.root)
    with _Timer() as t:
        ck = Checkpoint.load(ckpt_path)
        s = ck.extra["channel_stats"]
        stats = raster.ChannelStats(tuple(s["mean"]), tuple(s["std"]))
        x, _ = _load_tensors(cfg, [tid for _, tid in found], ck.extra["selection"], stats)
        feats = extract_features(ck, x.astype(np.float32))
        if not np.isfinite(feats).all():
            raise ValidationError("non-finite feature values")
        written = [write_features_csv(cfg.stage_dir("extract") / "features.csv", [c for c, _ in found], feats)]
    summary = {"rows": len(found), "feature_dim": int(feats.shape[1])}
    return write_manifest(cfg, "extract", base + tile_inputs, written, summary, t.elapsed)


# evaluate ---------------------------------------------------------------

def build_design(cfg, surveys, features, nl_xy, nl_v) -> DesignMatrix:
    absent = [s.cluster_id for s in surveys if s.cluster_id not in features]
    if absent:
        raise MissingInputError(f"no feature row for {len(absent)} survey cluster(s): {', '.join(absent[:10])}")
    locs = np.array([s.location for s in surveys])
    nls = nearest_within(locs, nl_xy, nl_v, cfg.tile_extent_m / 2.0)
    if not np.isfinite(nls).all():
        raise MissingInputError("some survey clusters have no nightlight value within half a tile")
    return DesignMatrix(np.stack([features[s.cluster_id] for s in surveys]), [s.awi for s in surveys],
                        [s.country for s in surveys], [s.cluster_id for s in surveys], locs, nls)


def head_params(cfg, head):
    if head == "ridge":
        return {"lambda": cfg.ridge_lambda}
    return {"n_trees": cfg.gbt_n_trees, "max_depth": cfg.gbt_max_depth,
            "learning_rate": cfg.gbt_learning_rate, "min_leaf": cfg.gbt_min_leaf}


def cmd_evaluate(cfg: PipelineConfig) -> dict:
    feat_path = cfg.path("features")
    inputs = [feat_path, cfg.path("surveys"), cfg.path("nightlights")]
    verify_inputs(inputs, cfg.root)
    out = cfg.stage_dir("evaluate")
    seed = stage_seed(cfg.seed, "evaluate")
    with _Timer() as t:
        surveys = geodata.read_survey_csv(cfg.path("surveys"))
        data = build_design(cfg, surveys, read_features_csv(feat_path), *geodata.read_nightlight_csv(cfg.path("nightlights")))
        metadata = {
            "rows": len(data), "features": int(data.rows.shape[1]),
            "countries": sorted(set(data.groups.tolist())), "seed": int(cfg.seed),
            "regimes": list(cfg.eval_regimes), "heads": list(cfg.heads),
            "percentiles": [float(p) for p in cfg.eval_percentiles], "folds": cfg.eval_folds,
        }
        report = {"metadata": metadata, "table": [], "regime_curves": {}}
        written = []
        if cfg.eval_regimes:
            written = _evaluate_all(cfg, data, seed, out, report)
        written.append(dump_json(out / "report.json", report))
        written.append(atomic_write(out / "report.txt", render_report(report)))
    summary = {row["model"]: row["mean_test_r2"] for row in report["table"]}
    return write_manifest(cfg, "evaluate", inputs, written, summary, t.elapsed)


def _evaluate_all(cfg, data, seed, out, report):
    written, rows = [], []
    nl_data = data.with_rows(np.asarray(data.nightlights, dtype=np.float64)[:, None])
    nl_preds = {}
    for head, name in (("gbt", "Nightlights / GBT"), ("ridge", "Nightlights / Ridge")):
        params = head_params(cfg, head) if head == "gbt" else None
        preds, rep = evaluation.loco_cv(nl_data, head, params, seed)
        preds = [replace(p, y_nightlight_pred=p.y_pred) for p in preds]
        rep.aggregate_residual_r2 = evaluation.residual_r2(preds)
        nl_preds[head] = {p.cluster_id: p.y_pred for p in preds}
        rows.append((name, rep))
        written.append(evaluation.write_predictions_csv(out / f"predictions_nightlights_{head}.csv", preds))

    for head in cfg.heads:
        preds, rep = evaluation.loco_cv(data, head, head_params(cfg, head), seed, nightlight_preds=nl_preds["gbt"])
        rep.percentile_curves = evaluation.percentile_curves(preds, cfg.eval_percentiles)
        rows.append((f"Features / {'Ridge' if head == 'ridge' else 'GBT'}", rep))
        written.append(evaluation.write_predictions_csv(out / f"predictions_features_{head}.csv", preds))
        written.append(evaluation.write_curves_csv(out / f"loco_curves_{head}.csv", rep.percentile_curves))
    report["table"] = [{"model": name, **rep.to_dict()} for name, rep in rows]
    report["table_text"] = evaluation.render_table(rows)

    for head in cfg.curve_heads:
        curves = evaluation.regime_curves(data, head, cfg.eval_regimes, cfg.eval_percentiles, cfg.eval_folds,
                                          seed, head_params(cfg, head), cfg.tile_extent_m)
        report["regime_curves"][head] = {k: [[p, r] for p, r in v] for k, v in curves.items()}
        written.append(evaluation.write_curves_csv(out / f"regime_curves_{head}.csv", curves))
    return written


def render_report(report: dict) -> str:
    meta = report["metadata"]
    lines = [f"rows: {meta['rows']}  features: {meta['features']}  countries: {', '.join(meta['countries'])}",
             f"seed: {meta['seed']}  regimes: {', '.join(meta['regimes']) or 'none'}", ""]
    if report["table"]:
        lines.append(report["table_text"])
    for head, curves in sorted(report["regime_curves"].items()):
        lines.append(f"percentile curves ({head} head, training restricted to the poorest fraction)")
        pcts = meta["percentiles"]
        lines.append(f"{'regime':<18}" + "".join(f"{p:>8.2f}" for p in pcts))
        for regime, points in curves.items():
            lines.append(f"{regime:<18}" + "".join(f"{evaluation.fmt_r2(r):>8}" for _, r in points))
        lines.append("")
    return "\n".join(lines).rstrip("\n") + "\n"


COMMANDS = {
    "synth": cmd_synth,
    "composite": cmd_composite,
    "sample": cmd_sample,
    "pretrain": cmd_pretrain,
    "extract": cmd_extract,
    "evaluate": cmd_evaluate,
}


def run_all(cfg: PipelineConfig) -> dict:
    return {name: COMMANDS[name](cfg) for name in STAGES}
