"""Flat JSON pipeline configuration with CLI overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ..errors import ConfigError, MissingInputError
from ..evaluation import REGIMES
from ..geodata import check_thresholds
from ..nn.models import ARCHITECTURES, BAND_MODES

PATH_KEYS = ("rasters", "surveys", "nightlights", "features")


@dataclass
class PipelineConfig:
    workdir: str = "work"
    rasters: str | None = None
    surveys: str | None = None
    nightlights: str | None = None
    features: str | None = None
    seed: int = 0
    tile_extent_m: float = 960.0
    threshold_low: float = 3.0
    threshold_high: float = 35.0
    # synth
    synth_variant: str = "imagery"
    synth_countries: int = 5
    synth_grid_side: int = 8
    synth_spacing_m: float = 3000.0
    synth_observations: int = 3
    synth_cloud_probability: float = 0.6
    synth_noise_sigma: float = 0.1
    synth_nightlight_noise: float = 1.0
    synth_clusters_per_country: int = 30
    # sample
    sample_count: int = 200
    density_sigma_m: float = 5000.0
    split_fractions: list = field(default_factory=lambda: [0.7, 0.15, 0.15])
    max_invalid_fraction: float = 0.5
    # pretrain
    architecture: str = "VGGF_TOY"
    band_mode: str = "ALL9"
    feature_dim: int = 64
    epochs: int = 60
    learning_rate: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    rgb_warmstart_epochs: int = 10
    # evaluate
    heads: list = field(default_factory=lambda: ["ridge", "gbt"])
    ridge_lambda: float | None = None
    gbt_n_trees: int = 100
    gbt_max_depth: int = 3
    gbt_learning_rate: float = 0.1
    gbt_min_leaf: int = 5
    eval_regimes: list = field(default_factory=lambda: list(REGIMES))
    eval_percentiles: list = field(default_factory=lambda: [round(0.1 * k, 1) for k in range(1, 11)])
    eval_folds: int = 5
    curve_heads: list = field(default_factory=lambda: ["ridge"])

    @classmethod
    def load(cls, path=None, **overrides) -> "PipelineConfig":
        values = {}
        if path is not None:
            try:
                with open(path) as fh:
                    values = json.load(fh)
            except FileNotFoundError:
                raise MissingInputError(f"config file {path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from None
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: expected a flat JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**values)
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"config value has the wrong type: {exc}") from None
        return cfg

    def validate(self):
        try:
            check_thresholds((self.threshold_low, self.threshold_high))
        except Exception as exc:
            raise type(exc)(f"config thresholds: {exc}") from None
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"architecture must be one of {ARCHITECTURES}")
        if self.band_mode not in BAND_MODES:
            raise ConfigError(f"band_mode must be one of {sorted(BAND_MODES)}")
        if self.synth_variant not in ("imagery", "idiosyncratic"):
            raise ConfigError("synth_variant must be 'imagery' or 'idiosyncratic'")
        bad = [r for r in self.eval_regimes if r not in REGIMES]
        if bad:
            raise ConfigError(f"unknown regimes {bad}; expected a subset of {REGIMES}")
        bad = [h for h in self.heads + self.curve_heads if h not in ("ridge", "gbt")]
        if bad:
            raise ConfigError(f"unknown heads {bad}")
        if any(not 0 < p <= 1 for p in self.eval_percentiles):
            raise ConfigError("eval_percentiles must lie in (0, 1]")
        if len(self.split_fractions) != 3:
            raise ConfigError("split_fractions needs three entries")
        for name in ("epochs", "batch_size", "sample_count", "eval_folds", "synth_countries"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")

    # resolved locations ---------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.workdir)

    def stage_dir(self, stage: str) -> Path:
        return self.root / stage

    def path(self, key: str) -> Path:
        value = getattr(self, key)
        if value is not None:
            p = Path(value)
            return p if p.is_absolute() else self.root / p
        defaults = {
            "rasters": self.root / "synth" / "stacks",
            "surveys": self.root / "synth" / "surveys.csv",
            "nightlights": self.root / "synth" / "nightlights.csv",
            "features": self.root / "extract" / "features.csv",
        }
        return defaults[key]

    @property
    def thresholds(self) -> tuple[float, float]:
        return (float(self.threshold_low), float(self.threshold_high))

    def snapshot(self) -> dict:
        """Resolved config for manifests; paths inside the workdir are made relative to it."""
        snap = asdict(self)
        snap.pop("workdir")
        for key in PATH_KEYS:
            snap[key] = rel(self.path(key), self.root)
        return snap


def rel(path, root) -> str:
    path, root = Path(os.path.abspath(path)), Path(os.path.abspath(root))
    try:
        return path.relative_to(root).as_posix()
    except ValueError:
        return path.as_posix()
