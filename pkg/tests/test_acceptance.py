"""Acceptance criteria 1-10 at their stated tolerances.

Each test carries a ``criterion`` marker; conftest prints one PASS/FAIL line per
criterion with the measured values. Criteria 7 and 8 use the toy model under
``artifacts/`` and regenerate it with the documented commands when it is absent
(about 1.5 hours on one CPU core).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest
from oracles import covisible_median, density_ratio, gradcheck, ipf_oracle
from test_metrics import quaternion_oracle_error, rmse_loop

from gmcnet.cli import load_model, main
from gmcnet.data import RegPair, build_pairs, camera_ring, load_pairs, random_shapes, virtual_scan
from gmcnet.formats import read_keyvalue
from gmcnet.geom import PointCloud, farthest_point_sample, random_se3
from gmcnet.match import (Correspondences, MatchMatrix, RegisterConfig, init_assignment, sinkhorn,
                          weighted_procrustes)
from gmcnet.metrics import icp_baseline, rmse_error, rotation_error, translation_error
from gmcnet.net import HGMConfig, init_hgm_params
from gmcnet.robustness import build_corpus, noise_curve, similarity_sweep
from gmcnet.train import evaluate_pairs, pair_loss

ROOT = Path(__file__).resolve().parents[1]
TOY_DATA = ROOT / "artifacts" / "toy_data"
TOY_MODEL = ROOT / "artifacts" / "toy_model"
GEN_TOY = ["gen", "--protocol", "crop", "--shapes", "40", "--test-shapes", "20", "--points", "768",
           "--rot-max", "180", "--seed", "0", "--out", str(TOY_DATA)]
TRAIN_TOY = ["train", "--dataset", str(TOY_DATA), "--val", str(TOY_DATA / "test"), "--epochs", "200",
             "--ri-kind", "PPF", "--channels", "32", "--levels", "768,256,128", "--checkpoint-every", "10",
             "--val-every", "10", "--seed", "0", "--out", str(TOY_MODEL)]


@pytest.fixture(scope="module")
def corpus():
    return build_corpus(50, 2048, seed=0)


@pytest.mark.criterion(1, "RI invariance under rotation")
def test_ri_invariance(corpus, record_property):
    magnitudes = np.sort(np.random.default_rng(1).uniform(0, 180, 20))
    start = time.perf_counter()
    sims = {kind: similarity_sweep(corpus, kind, magnitudes, seed=1, fresh_axis=True)
            for kind in ("rri", "ppf", "fpfh")}
    elapsed = time.perf_counter() - start
    worst = {k: float(v.min()) for k, v in sims.items()}
    record_property("measured", f"min similarity {worst}, {elapsed:.0f} s")
    assert all(v >= 0.999999 for v in worst.values())
    assert elapsed < 120


@pytest.mark.criterion(2, "SE(3) curves below 0.999 and flat")
def test_se3_degradation(corpus, record_property):
    magnitudes = np.arange(0.0, 181.0, 15.0)
    curves = {kind: similarity_sweep(corpus, kind, magnitudes, mode="se3") for kind in ("ppf", "rri")}
    spread = {k: float(np.max(np.abs(v - v.mean()))) for k, v in curves.items()}
    top = {k: float(v.max()) for k, v in curves.items()}
    record_property("measured", f"max similarity {top}, max deviation from mean {spread}")
    assert all(v < 0.999 for v in top.values())
    assert all(v <= 0.01 for v in spread.values())


@pytest.mark.criterion(3, "noise ordering XYZ < dXYZ < RI features")
def test_noise_ordering(corpus, record_property):
    kinds = ("xyz", "dxyz", "rri", "ppf", "fpfh")
    curve = noise_curve(corpus, kinds, [0.06, 0.1])
    s = curve.series
    record_property("measured", ", ".join(f"{k} {np.round(s[k], 4).tolist()}" for k in kinds))
    ri_min = np.minimum.reduce([s["rri"], s["ppf"], s["fpfh"]])
    assert np.all(s["xyz"] < s["dxyz"]) and np.all(s["dxyz"] < ri_min)
    again = noise_curve(corpus[:5], kinds, [0.06, 0.1])
    assert all(np.array_equal(again.series[k], noise_curve(corpus[:5], kinds, [0.06, 0.1]).series[k])
               for k in kinds)


@pytest.mark.criterion(4, "Procrustes exactness")
def test_procrustes_exactness(record_property):
    rng = np.random.default_rng(4)
    worst_r = worst_t = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 200))
        src = rng.normal(size=(n, 3)) * rng.uniform(0.1, 2.0, size=3)
        t = random_se3(rng=rng)
        est = weighted_procrustes(PointCloud(src), Correspondences(t.apply(src), np.ones(n)))
        worst_r = max(worst_r, rotation_error(t.rotation, est.rotation))
        worst_t = max(worst_t, translation_error(t.translation, est.translation))
    dets = []
    for _ in range(200):
        src = rng.normal(size=(40, 3)) * [1.0, 1.0, rng.choice([1.0, 0.01])]
        mirror = np.diag(rng.permutation([1.0, 1.0, -1.0]))
        est = weighted_procrustes(PointCloud(src), Correspondences(src @ mirror, rng.uniform(0.2, 1, 40)))
        dets.append(np.linalg.det(est.rotation))
    record_property("measured", f"max L_R {worst_r:.2e} rad, max L_t {worst_t:.2e}, "
                                f"reflection det range [{min(dets):.12f}, {max(dets):.12f}]")
    assert worst_r < 1e-7 and worst_t < 1e-9
    assert np.allclose(dets, 1.0, atol=1e-9)


@pytest.mark.criterion(5, "Sinkhorn vs IPF oracle and slack outlier rejection")
def test_sinkhorn_oracle(record_property):
    rng = np.random.default_rng(5)
    sums = oracle = 0.0
    for _ in range(100):
        a = rng.uniform(0.01, 5.0, size=(8, 8))
        out = sinkhorn(MatchMatrix(a), 100).weights
        sums = max(sums, np.abs(out.sum(1) - 1).max(), np.abs(out.sum(0) - 1).max())
        oracle = max(oracle, np.abs(out - ipf_oracle(a, 100)).max())
    outlier = 0.0
    for _ in range(100):
        cost = rng.uniform(0, 1, size=(8, 8))
        row = rng.integers(8)
        cost[row] = rng.uniform(20, 50)
        outlier = max(outlier, sinkhorn(init_assignment(cost, alpha=1.0), 5).core[row].sum())
    record_property("measured", f"sum error {sums:.1e}, oracle error {oracle:.1e}, outlier mass {outlier:.1e}")
    assert sums < 1e-6 and oracle < 1e-6 and outlier < 0.1


@pytest.mark.criterion(6, "full-pipeline gradient integrity")
def test_pipeline_gradient(record_property):
    rng = np.random.default_rng(6)
    x = rng.normal(size=(32, 3)) * [1.0, 0.6, 0.35]
    gt = random_se3(rng=rng)
    pair = RegPair(PointCloud(x), PointCloud(gt.apply(x[rng.permutation(32)])), gt)
    hgm = HGMConfig(levels=(32, 16, 8), k=4, cu=8, cs=(8, 8, 8))
    reg = RegisterConfig(hgm, sinkhorn_iters=5)
    params = init_hgm_params(hgm, 6)
    leaves = [t for _, t in params.items()]
    err = gradcheck(lambda _: pair_loss(pair, params, reg, 0.01)[0], leaves, h=1e-5, total=50, seed=6)
    record_property("measured", f"max relative error {err:.2e} over 50 probes")
    assert err < 1e-4


def ensure_toy_model():
    if not (TOY_DATA / "manifest.csv").exists():
        assert main(GEN_TOY) == 0
    if not (TOY_MODEL / "model.gmc").exists():
        assert main(TRAIN_TOY) == 0


@pytest.fixture(scope="module")
def toy_results():
    ensure_toy_model()
    data_cfg = read_keyvalue(TOY_DATA / "dataset.config")
    run = read_keyvalue(TOY_MODEL / "run.config")
    assert data_cfg["protocol"] == "crop" and int(data_cfg["count"]) == 40 and int(data_cfg["points"]) == 768
    assert float(data_cfg["noise"]) == 0.0 and float(data_cfg["rot_max"]) == 180.0
    assert int(run["epochs"]) == 200
    train_hours = ((TOY_MODEL / "model.gmc").stat().st_mtime - (TOY_MODEL / "run.config").stat().st_mtime) / 3600
    held_out = load_pairs(TOY_DATA / "test")
    params, reg = load_model(TOY_MODEL)
    model_errs, _ = evaluate_pairs(held_out, params, reg)
    icp = [icp_baseline(p.source, p.target) for p in held_out]
    icp_lr = np.array([rotation_error(p.gt.rotation, t.rotation) for p, t in zip(held_out, icp)])
    return len(held_out), train_hours, model_errs, icp_lr


@pytest.mark.criterion(7, "toy full-range registration")
def test_toy_registration(toy_results, record_property):
    count, hours, errs, _ = toy_results
    med_lr = math.degrees(float(np.median(errs[:, 0])))
    med_rmse = float(np.median(errs[:, 2]))
    record_property("measured", f"{count} pairs, median L_R {med_lr:.3f} deg, median L_RMSE {med_rmse:.5f}, "
                                f"training {hours:.2f} h")
    assert count == 20 and hours < 4
    assert med_lr < 5 and med_rmse < 0.05


@pytest.mark.criterion(8, "ICP baseline separation")
def test_icp_separation(toy_results, record_property):
    _, _, errs, icp_lr = toy_results
    model_mean, icp_mean = math.degrees(errs[:, 0].mean()), math.degrees(icp_lr.mean())
    record_property("measured", f"ICP mean L_R {icp_mean:.2f} deg, model mean {model_mean:.2f} deg, "
                                f"ratio {icp_mean / max(model_mean, 1e-12):.2f}")
    assert icp_mean >= 10 * model_mean


@pytest.mark.criterion(9, "dataset protocol fidelity")
def test_dataset_fidelity(record_property):
    meshes = random_shapes(8, 9)
    pairs = build_pairs(meshes, views_per_mesh=4, min_overlap=0.4, seed=9)
    medians = [covisible_median(p, meshes[int(p.shape_id[5:])]) for p in pairs]
    centers = np.array([c.translation for c in camera_ring(26)])
    unit = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    cos = unit @ unit.T
    np.fill_diagonal(cos, -1)
    separation = math.degrees(math.acos(min(1.0, cos.max())))
    scan = virtual_scan(meshes[0], camera_ring(26)[3], n_out=None)
    fps_same = all(np.array_equal(farthest_point_sample(scan, 2048, s), farthest_point_sample(scan, 2048, s))
                   for s in (0, 17))
    ratio = density_ratio()
    record_property("measured", f"{len(pairs)} pairs, worst overlap median {max(medians):.4f}, "
                                f"ring separation {separation:.2f} deg, density ratio {ratio:.2f}")
    assert pairs and max(medians) < 2 * 0.05
    assert separation > 25 and fps_same and ratio >= 1.5


@pytest.mark.criterion(10, "metric formula fidelity")
def test_metric_formulas(record_property):
    quat = quaternion_oracle_error(10_000, seed=10)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(200):
        pts = rng.normal(size=(int(rng.integers(1, 300)), 3))
        gt, pred = random_se3(rng=rng), random_se3(rng=rng)
        worst = max(worst, abs(rmse_error(pts, gt, pred) - rmse_loop(pts, gt, pred)))
    record_property("measured", f"quaternion oracle {quat:.1e} rad, L_RMSE formula {worst:.1e}")
    assert quat < 1e-9 and worst < 1e-12
