"""Acceptance criteria, one test per criterion.

Each test prints a ``PASS``/``FAIL`` line and the lines are repeated in the
pytest terminal summary. Run alone with::

    pytest tests/test_acceptance.py -s
"""

import contextlib
import json
import math
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

import gradcheck
from conftest import ACCEPTANCE_LINES, run
from oracles import flat_oracle
from oracles.pearson import r2 as oracle_r2
from oracles.ridge_gd import ridge_gd
from satwealth import evaluation, geodata, heads, raster
from satwealth.evaluation import Prediction
from satwealth.heads import GBTParams
from satwealth.nn import adapt_first_layer, dilated_conv2d
from satwealth.nn.train import Checkpoint

HERE = Path(__file__).parent
EXPECTED = json.loads((HERE / "oracles" / "expected.json").read_text())


@contextlib.contextmanager
def criterion(number, title, budget_s=None):
    """Time the block, print one PASS/FAIL line, then let any failure propagate."""
    info = {}
    start = time.perf_counter()
    ok = False
    try:
        yield info
        elapsed = time.perf_counter() - start
        info["time"] = f"{elapsed:.2f}s"
        if budget_s is not None:
            info["budget"] = f"{budget_s}s"
            assert elapsed < budget_s, f"took {elapsed:.2f}s, budget {budget_s}s"
        ok = True
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in info.items())
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title} ({detail})"
        print(line)
        ACCEPTANCE_LINES.append(line)


# shared pipeline runs ---------------------------------------------------

@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    """Two full default pipelines in separate workdirs with the same master seed."""
    runs = []
    for name in ("a", "b"):
        work = tmp_path_factory.mktemp(f"default_{name}") / "work"
        start = time.perf_counter()
        assert run("all", workdir=work) == 0
        runs.append((work, time.perf_counter() - start))
    return runs


# 1 ----------------------------------------------------------------------

def test_criterion_1_dilation_resolution_equivalence():
    with criterion(1, "dilated conv on upsampled grid == native conv", budget_s=10) as info:
        worst, cases = 0.0, 0
        for r in (2, 4):
            for seed in range(50):
                rng = np.random.default_rng(1000 * r + seed)
                side = int(rng.integers(3, 12))
                f = int(rng.choice([1, 2, 3, 5]))
                c, k = int(rng.integers(1, 4)), int(rng.integers(1, 4))
                grid = rng.normal(size=(c, side, side))
                kernel = rng.normal(size=(f, f, c, k))
                native = dilated_conv2d(grid, kernel, None, 1, [1] * c)
                upsampled = dilated_conv2d(raster.nn_upsample(grid, r), kernel, None, r, [r] * c)
                assert native.dtype == np.float64 and native.shape == upsampled.shape
                worst = max(worst, float(np.max(np.abs(native - upsampled))))
                cases += 1
        info.update(cases=cases, max_abs_diff=worst)
        assert worst == 0.0


# 2 ----------------------------------------------------------------------

def test_criterion_2_first_layer_adaptation():
    with criterion(2, "RGB kernel copied, extra channels = RGB mean", budget_s=1) as info:
        mismatches = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            f, k = int(rng.integers(1, 8)), int(rng.integers(1, 9))
            w = rng.normal(size=(f, f, 3, k))
            out = adapt_first_layer(w)
            assert out.shape == (f, f, 9, k)
            assert out[:, :, :3].tobytes() == w[:, :, :3].tobytes()
            for i in range(f):
                for j in range(f):
                    for kk in range(k):
                        a, b, c = (float(w[i, j, ch, kk]) for ch in range(3))
                        mean = (a + b + c) / 3.0
                        mismatches += sum(out[i, j, ch, kk] != mean for ch in range(3, 9))
        info.update(tensors=20, mismatches=mismatches)
        assert mismatches == 0


# 3 ----------------------------------------------------------------------

def test_criterion_3_gradient_correctness():
    with criterion(3, "backward passes match central differences", budget_s=60) as info:
        worst, per_type = {}, {}
        for seed in range(20):
            for name, layer, x, train in gradcheck.layer_cases(seed):
                err = gradcheck.check_layer(layer, x, np.random.default_rng(seed), train)
                worst[name] = max(worst.get(name, 0.0), err)
                per_type[name] = per_type.get(name, 0) + 1
            worst["cross_entropy"] = max(worst.get("cross_entropy", 0.0),
                                         gradcheck.check_cross_entropy(np.random.default_rng(seed)))
            per_type["cross_entropy"] = per_type.get("cross_entropy", 0) + 1
        info.update(layer_types=len(worst), min_seeds=min(per_type.values()), max_rel_err=f"{max(worst.values()):.2e}")
        assert min(per_type.values()) >= 20
        bad = {k: v for k, v in worst.items() if not v < gradcheck.TOL}
        assert not bad, bad


# 4 ----------------------------------------------------------------------

def test_criterion_4_ridge_matches_gradient_descent():
    with criterion(4, "closed-form ridge == converged gradient descent", budget_s=5) as info:
        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(50, 5)) * rng.uniform(0.5, 3.0, 5) + rng.normal(size=5)
            y = X @ rng.normal(size=5) + 0.3 * rng.normal(size=50)
            model = heads.ridge_fit(X, y, 0.1)
            w, _ = ridge_gd(X, y, 0.1)
            worst = max(worst, float(np.linalg.norm(model.weights - w) / np.linalg.norm(w)))
        info.update(problems=10, max_rel_err=f"{worst:.2e}")
        assert worst < 1e-6


# 5 ----------------------------------------------------------------------

def test_criterion_5_gbt_monotone_and_stump():
    with criterion(5, "GBT training MSE non-increasing; stump exact fit", budget_s=10) as info:
        worst_rise = -math.inf
        for seed in range(10):
            rng = np.random.default_rng(seed)
            X = rng.normal(size=(100, 3))
            y = np.sin(2 * X[:, 0]) + X[:, 1] * X[:, 2] + 0.2 * rng.normal(size=100)
            model = heads.gbt_fit(X, y, GBTParams(n_trees=100, max_depth=3, learning_rate=0.1))
            trace = np.array(model.train_mse)
            assert len(trace) == 101
            worst_rise = max(worst_rise, float(np.diff(trace).max()))
        x = np.array([-1.0] * 5 + [1.0] * 5)[:, None]
        stump = heads.gbt_fit(x, np.sign(x[:, 0]), GBTParams(n_trees=1, max_depth=1, learning_rate=1.0))
        exact = bool(np.array_equal(stump.predict(x), np.sign(x[:, 0])))
        info.update(datasets=10, max_mse_increase=f"{worst_rise:.2e}", stump_exact=exact)
        assert worst_rise <= 0.0 and exact


# 6 ----------------------------------------------------------------------

def test_criterion_6_metric_identities():
    with criterion(6, "r2 identities, p=1 filter, nightlight self-residual", budget_s=1) as info:
        checks = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            y = rng.normal(size=int(rng.integers(3, 60))) * rng.uniform(0.1, 100)
            yp = y + rng.normal(size=len(y))
            nl = y + rng.normal(size=len(y))
            assert evaluation.r_squared(y, y) == 1.0
            assert evaluation.r_squared(y, -y) == 1.0
            preds = [Prediction(str(k), "A", float(a), float(b), float(c)) for k, (a, b, c) in enumerate(zip(y, yp, nl))]
            assert evaluation.percentile_filtered_eval(preds, 1.0) == evaluation.r_squared(y, yp)
            self_preds = [Prediction(p.cluster_id, p.country, p.y_true, p.y_nightlight_pred, p.y_nightlight_pred)
                          for p in preds]
            assert evaluation.residual_r2(self_preds) == 1.0
            assert evaluation.r_squared(y, yp) == pytest.approx(oracle_r2(y, yp), abs=1e-12)
            checks += 5
        info.update(checks=checks)


# 7 ----------------------------------------------------------------------

def test_criterion_7_end_to_end_pipeline(default_runs):
    work, elapsed = default_runs[0]
    with criterion(7, "default bundle: LOCO test r2 >= 0.8, val accuracy >= 0.95") as info:
        report = json.loads((work / "evaluate" / "report.json").read_text())
        rows = {r["model"]: r for r in report["table"]}
        loco = rows["Features / Ridge"]["mean_test_r2"]
        val = Checkpoint.load(work / "pretrain" / "checkpoint.bin").val_accuracy
        frozen = EXPECTED["flat_oracle_imagery_seed0"]
        live = flat_oracle.imagery(work)
        info.update(loco_test_r2=f"{loco:.4f}", val_accuracy=f"{val:.3f}",
                    oracle_r2=f"{live['loco_mean_test_r2']:.4f}", pipeline_time=f"{elapsed:.1f}s")
        assert loco >= 0.8 and val >= 0.95
        assert live["loco_mean_test_r2"] == pytest.approx(frozen["loco_mean_test_r2"], abs=1e-9)
        assert frozen["loco_mean_test_r2"] >= 0.8
        assert min(live["class_fractions"]) >= 0.10
        assert elapsed < 600


# 8 ----------------------------------------------------------------------

def test_criterion_8_pooled_beats_out_of_country(tmp_path):
    with criterion(8, "idiosyncratic bundle: POOLED > OOC at every percentile") as info:
        work = tmp_path / "work"
        cfg = HERE / "data" / "idiosyncratic.json"
        assert run("synth", cfg, work) == 0 and run("evaluate", cfg, work) == 0
        curves = json.loads((work / "evaluate" / "report.json").read_text())["regime_curves"]["ridge"]
        pooled = dict((p, r) for p, r in curves["POOLED"])
        ooc = dict((p, r) for p, r in curves["OOC"])
        gaps = {p: pooled[p] - ooc[p] for p in (0.25, 0.5, 0.75, 1.0)}
        oracle = flat_oracle.idiosyncratic(work)
        oracle_gaps = [a - b for a, b in zip(oracle["POOLED"], oracle["OOC"])]
        info.update(min_gap=f"{min(gaps.values()):.3f}", oracle_min_gap=f"{min(oracle_gaps):.3f}")
        assert all(g > 0 for g in gaps.values())
        assert all(g > 0 for g in oracle_gaps)
        frozen = EXPECTED["flat_oracle_idiosyncratic_seed0"]
        assert np.allclose(oracle["POOLED"], frozen["POOLED"], atol=1e-9)
        assert np.allclose(oracle["OOC"], frozen["OOC"], atol=1e-9)


# 9 ----------------------------------------------------------------------

def test_criterion_9_split_disjointness():
    with criterion(9, "no cross-split footprint overlaps", budget_s=10) as info:
        overlaps, total = 0, 0
        for config in range(100):
            rng = np.random.default_rng(config)
            n = int(rng.integers(10, 150))
            spread = rng.uniform(300, 4000) * np.sqrt(n)
            locs = rng.uniform(0, spread, (n, 2))
            train = rng.uniform(0.5, 0.8)
            val = rng.uniform(0.05, 1 - train - 0.05)
            fractions = (train, val, 1 - train - val)
            ids = [f"s{k}" for k in range(n)]
            split = geodata.assign_splits(ids, locs, fractions, 960.0, seed=config)
            where = {}
            for name, members in (("train", split.train), ("val", split.val), ("test", split.test)):
                for sid in members:
                    where[sid] = name
            assert len(where) == n
            names = np.array([where[s] for s in ids])
            cheb = np.abs(locs[:, None, :] - locs[None, :, :]).max(axis=2)
            clash = (cheb < 960.0) & (names[:, None] != names[None, :])
            overlaps += int(clash.sum()) // 2
            total += n * (n - 1) // 2
        info.update(configs=100, pairs_checked=total, overlaps=overlaps)
        assert overlaps == 0


# 10 ---------------------------------------------------------------------

def test_criterion_10_determinism(default_runs):
    (a, _), (b, _) = default_runs
    with criterion(10, "two runs with one seed are byte-identical") as info:
        files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file() and p.name != "timing.json")
        files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file() and p.name != "timing.json")
        assert files_a == files_b
        differing = [str(p) for p in files_a if (a / p).read_bytes() != (b / p).read_bytes()]
        key = [p for p in files_a if p.name in ("manifest.json", "checkpoint.bin", "features.csv", "report.json")]
        info.update(files=len(files_a), key_files=len(key), differing=len(differing))
        assert len(key) >= 9
        assert not differing, differing[:5]


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-s", "-q"]))
