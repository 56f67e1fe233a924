import json
import shutil

import pytest

from satwealth.pipeline.cli import main

SMALL = {
    "synth_countries": 3, "synth_grid_side": 4, "synth_clusters_per_country": 8, "sample_count": 40,
    "epochs": 1, "rgb_warmstart_epochs": 1, "feature_dim": 8, "eval_percentiles": [0.5, 1.0], "eval_folds": 3,
}


def write_config(path, **values):
    path.write_text(json.dumps(values))
    return str(path)


def run(stage, config=None, workdir=None, seed=None):
    argv = [stage]
    if config is not None:
        argv += ["--config", str(config)]
    if workdir is not None:
        argv += ["--workdir", str(workdir)]
    if seed is not None:
        argv += ["--seed", str(seed)]
    return main(argv)


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """A complete small pipeline run; treat as read-only (copy it to mutate)."""
    root = tmp_path_factory.mktemp("small")
    cfg = write_config(root / "config.json", **SMALL)
    work = root / "work"
    assert run("all", cfg, work) == 0
    return cfg, work


@pytest.fixture
def small_copy(small_run, tmp_path):
    cfg, work = small_run
    dest = tmp_path / "work"
    shutil.copytree(work, dest)
    return cfg, dest


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
