"""Stage manifests, input verification and per-stage seeds."""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .._io import dump_json, sha256_file
from ..errors import MissingInputError, StaleInput
from .config import PipelineConfig, rel

MANIFEST_NAME = "manifest.json"
TIMING_NAME = "timing.json"


def stage_seed(master: int, name: str) -> int:
    """Child seed for a named substream of the master seed."""
    seq = np.random.SeedSequence(int(master), spawn_key=(zlib.crc32(name.encode()),))
    return int(seq.generate_state(1, np.uint64)[0])


def hash_entries(paths, root) -> dict:
    entries = {}
    for path in sorted(paths, key=lambda p: rel(p, root)):
        if not Path(path).is_file():
            raise MissingInputError(f"missing input {path}")
        entries[rel(path, root)] = sha256_file(path)
    return entries


def write_manifest(cfg: PipelineConfig, stage: str, inputs, outputs, summary=None, wall_time=None) -> dict:
    """Record hashes of ``inputs`` and ``outputs`` plus the resolved config.

    Wall time goes to a sibling timing file so reruns leave the manifest
    byte-identical.
    """
    root = cfg.root
    manifest = {
        "stage": stage,
        "seed": int(cfg.seed),
        "config": cfg.snapshot(),
        "inputs": hash_entries(inputs, root),
        "outputs": hash_entries(outputs, root),
        "summary": summary or {},
    }
    out_dir = cfg.stage_dir(stage)
    dump_json(out_dir / MANIFEST_NAME, manifest)
    if wall_time is not None:
        dump_json(out_dir / TIMING_NAME, {"stage": stage, "wall_time_s": round(float(wall_time), 3)})
    return manifest


def load_manifest(stage_dir) -> dict:
    path = Path(stage_dir) / MANIFEST_NAME
    if not path.is_file():
        raise MissingInputError(f"no manifest at {path}; run that stage first")
    with open(path) as fh:
        return json.load(fh)


def _producer(path: Path, root: Path, cache: dict):
    """Nearest manifest above ``path`` (inside the workdir), or None."""
    root = root.resolve()
    d = path.resolve().parent
    while True:
        if d in cache:
            return cache[d]
        m = d / MANIFEST_NAME
        if m.is_file():
            with open(m) as fh:
                cache[d] = json.load(fh)
            return cache[d]
        if d == root or root not in d.parents:
            return None
        d = d.parent


def verify_inputs(paths, root) -> None:
    """Check each input exists and still matches the manifest of the stage that wrote it.

    Files with no producing manifest (user-supplied data) only need to exist.
    """
    root = Path(root)
    cache: dict = {}
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise MissingInputError(f"{len(missing)} missing input(s): {shown}")
    for p in paths:
        manifest = _producer(Path(p), root, cache)
        if manifest is None:
            continue
        key = rel(p, root)
        recorded = manifest["outputs"].get(key)
        if recorded is None:
            raise StaleInput(f"{key} is not an output of stage '{manifest['stage']}'; rerun it")
        if recorded != sha256_file(p):
            raise StaleInput(f"{key} changed since stage '{manifest['stage']}' wrote it; rerun it")
