"""Acceptance suite.

Ten binding criteria, one test per criterion, so a verbose pytest run
prints one pass/fail line for each.  Tolerances and time budgets are
pinned as module constants.  The pipeline criteria share two full
command-line runs (100 subjects, 3200 windows, 100 epochs) executed once
per session into separate output roots.
"""

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

import oracles
import test_cluster as cluster_tests
import test_features as feature_tests
import test_nnet as nnet_tests

from hrvstress import autoenc, cli, cluster, features as feat, ingest, nnet, pipeline

# pipeline configuration under test
SEED = 0
EPOCHS = 100
EPS = 0.15
N_SUBJECTS = 100
STRESSED_FRAC = 0.9

# pinned tolerances
LAE_PARAM_COUNT = 5163
CAE_PARAM_TARGET = 710
CAE_PARAM_REL_TOL = 0.15
GRAD_REL_TOL = 1e-4
GRAD_N_CONFIGS = 50
TIME_FEATURE_REL_TOL = 1e-9
PARSEVAL_REL_TOL = 0.10
TONE_HF_NU_MIN = 95.0
N_DBSCAN_INSTANCES = 50
SPLIT_TOL = 0.05
MARKER_P_MAX = 0.01
HALVING_RATIO = 0.5
LAE_EPOCHS = 10
N_SPLIT_PAIRS = 1000
KNN_AGREEMENT_MIN = 0.95

# pinned budgets, seconds
BUDGET_FAST = 60.0
BUDGET_PIPELINE = 15 * 60.0
BUDGET_LAE = 30 * 60.0


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    return Path(pipeline.make_mixed_cohort(
        root / "cohort", N_SUBJECTS, STRESSED_FRAC, SEED
    ))


def _run_cli(cohort_dir, out_root):
    rc = cli.main([
        "run", "--cohort", str(cohort_dir), "--out", str(out_root),
        "--seed", str(SEED), "--model", "cae",
        "--epochs", str(EPOCHS), "--eps", str(EPS),
    ])
    assert rc == 0
    return out_root / f"run_seed{SEED}"


@pytest.fixture(scope="module")
def run_a(cohort_dir, tmp_path_factory):
    t0 = time.perf_counter()
    run_dir = _run_cli(cohort_dir, tmp_path_factory.mktemp("exec-a"))
    return run_dir, time.perf_counter() - t0


@pytest.fixture(scope="module")
def run_b(cohort_dir, tmp_path_factory):
    return _run_cli(cohort_dir, tmp_path_factory.mktemp("exec-b"))


@pytest.fixture(scope="module")
def cohort_windows(cohort_dir):
    cohort = ingest.load_cohort(cohort_dir)
    windows = pipeline.build_windows(cohort, ingest.CleanConfig(), "global")
    scaled = np.stack([w.scaled for w in windows])
    split = ingest.make_split(len(windows), ingest.derive_seed(SEED, "split"))
    with open(cohort_dir / "labels.csv", newline="", encoding="utf-8") as fh:
        regime = {r["subject_id"]: r["regime"] for r in csv.DictReader(fh)}
    stressed = np.array(
        [regime[w.source_subject] == "stressed" for w in windows], dtype=bool
    )
    return windows, scaled, split, stressed


def _load_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _load_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_criterion_01_recurrent_model_param_count_exact():
    spec = autoenc.lae_spec()
    assert spec.param_count == LAE_PARAM_COUNT
    assert nnet.count_params(spec.layers) == LAE_PARAM_COUNT


def test_criterion_02_conv_model_param_count_and_manifests(run_a, run_b):
    realized = autoenc.cae_spec().param_count
    assert abs(realized - CAE_PARAM_TARGET) <= CAE_PARAM_REL_TOL * CAE_PARAM_TARGET
    for run_dir in (run_a[0], run_b):
        manifest = _load_json(run_dir / "manifest.json")
        assert manifest["param_counts"]["cae"] == realized


def test_criterion_03_gradients_match_finite_differences():
    assert nnet_tests.REL_TOL == GRAD_REL_TOL
    assert nnet_tests.N_CONFIGS == GRAD_N_CONFIGS
    sweeps = (
        nnet_tests.test_gradcheck_conv1d,
        nnet_tests.test_gradcheck_dense,
        nnet_tests.test_gradcheck_lstm_sequences,
        nnet_tests.test_gradcheck_maxpool,
        nnet_tests.test_gradcheck_upsample,
        nnet_tests.test_gradcheck_repeat,
        nnet_tests.test_gradcheck_relu,
        nnet_tests.test_gradcheck_elu,
        nnet_tests.test_gradcheck_losses,
    )
    t0 = time.perf_counter()
    for sweep in sweeps:
        sweep()
    assert time.perf_counter() - t0 < BUDGET_FAST


def test_criterion_04_feature_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(40404)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        rr = rng.uniform(400.0, 1500.0, size=n)
        got = feat.time_domain(rr)
        want = feature_tests._oracle_time_domain(rr)
        for key, value in want.items():
            assert feature_tests._rel_close(got[key], value, TIME_FEATURE_REL_TOL), key
    for _ in range(1000):
        x = rng.normal(0.0, 1.0, size=2048)
        x = x - x.mean()
        psd = feat.welch_psd(x)
        total = float(np.trapezoid(psd.power, psd.freqs))
        var = float(x.var())
        assert abs(total - var) <= PARSEVAL_REL_TOL * var
    tone = ingest.SynthConfig(
        n_subjects=1, regime="calm", mean_rr_ms=800.0, rr_sd_ms=0.0,
        lf_amp=0.0, hf_amp=50.0, seed=1, n_beats=30,
    )
    fv = feat.features(ingest.synth_cohort(tone)[0].intervals)
    assert fv.hf_nu > TONE_HF_NU_MIN
    assert time.perf_counter() - t0 < BUDGET_FAST


def test_criterion_05_dbscan_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(50505)
    for _ in range(N_DBSCAN_INSTANCES):
        pts, eps, min_pts = cluster_tests._random_instance(rng)
        assert pts.shape[0] <= 200
        ours = cluster.dbscan(pts, eps, min_pts)
        ref = oracles.brute_force_dbscan([tuple(p) for p in pts], eps, min_pts)
        assert oracles.partition_of(list(ours.labels)) == oracles.partition_of(ref)
    assert time.perf_counter() - t0 < BUDGET_FAST


def test_criterion_06_mixed_cohort_recovers_regimes(run_a, cohort_windows):
    run_dir, elapsed = run_a
    assert elapsed < BUDGET_PIPELINE
    windows, _, _, stressed = cohort_windows
    assert len(windows) >= 3000

    manifest = _load_json(run_dir / "manifest.json")
    assert manifest["n_windows"] == len(windows)
    folds = manifest["clustering"]["cae"]
    assert sorted(folds) == [f"fold{j}" for j in range(5)]
    for info in folds.values():
        assert len(info["cluster_sizes"]) == 2  # (a) exactly two clusters per fold

    report = _load_json(run_dir / "cae" / "report.json")
    sizes = {int(c): n for c, n in report["cluster_sizes"].items()}
    assert sorted(sizes) == [0, 1]
    assignment = {int(c): v for c, v in report["assignment"].items()}
    assert sorted(assignment.values()) == ["normal", "stressed"]
    stressed_cluster = next(c for c, v in assignment.items() if v == "stressed")
    normal_cluster = 1 - stressed_cluster

    # (b) cluster split within 5 percentage points of the 90/10 design
    total = sum(sizes.values())
    assert abs(sizes[stressed_cluster] / total - STRESSED_FRAC) <= SPLIT_TOL
    assert abs(sizes[normal_cluster] / total - (1.0 - STRESSED_FRAC)) <= SPLIT_TOL

    # (c) binding markers separate significantly, in the stated directions
    for marker in ("rmssd", "lf_hf"):
        assert report["tests"][marker]["p"] < MARKER_P_MAX
    m = report["markers"]
    assert (m["rmssd"][str(stressed_cluster)]["mean"]
            < m["rmssd"][str(normal_cluster)]["mean"])
    assert (m["lf_hf"][str(stressed_cluster)]["mean"]
            > m["lf_hf"][str(normal_cluster)]["mean"])

    # (d) the stressed label lands on the ground-truth-majority cluster
    rows = _load_rows(run_dir / "cae" / "clusters.csv")
    votes = {0: [0, 0], 1: [0, 0]}
    for row in rows:
        if row["is_noise"] == "1":
            continue
        c = int(row["cluster"])
        votes[c][int(stressed[int(row["window_id"])])] += 1
    majority_stressed = next(c for c in votes if votes[c][1] > votes[c][0])
    assert stressed_cluster == majority_stressed


def test_criterion_07_training_halves_validation_error(run_a, cohort_windows):
    run_dir, _ = run_a
    report = _load_json(run_dir / "cae" / "report.json")
    finals = report["extras"]["final_val_loss_per_fold"]
    untrained = report["extras"]["untrained_val_loss_per_fold"]
    assert sorted(finals) == sorted(untrained) == [f"fold{j}" for j in range(5)]
    for key in finals:
        assert finals[key] <= HALVING_RATIO * untrained[key]

    _, scaled, split, _ = cohort_windows
    spec = autoenc.lae_spec()
    cfg = autoenc.TrainConfig(
        epochs=LAE_EPOCHS, batch_size=64, lr=1e-4, loss="mae", seed=SEED
    )
    t0 = time.perf_counter()
    for j in range(ingest.N_FOLDS):
        fr = autoenc.train_fold(spec, scaled, split, j, cfg)
        assert fr.final_val_loss <= HALVING_RATIO * fr.untrained_val_loss
    assert time.perf_counter() - t0 < BUDGET_LAE


def test_criterion_08_split_invariants_hold_randomly():
    rng = np.random.default_rng(80808)
    for _ in range(N_SPLIT_PAIRS):
        n = int(rng.integers(50, 2000))
        seed = int(rng.integers(0, 2**62))
        plan = ingest.make_split(n, seed)
        test = np.asarray(plan.test_indices)
        assert test.size == int(math.floor(0.1 * n + 0.5))
        assert np.all(np.diff(test) > 0)
        parts = [test] + [np.asarray(f) for f in plan.folds]
        assert len(plan.folds) == ingest.N_FOLDS
        sizes = [p.size for p in parts[1:]]
        assert max(sizes) - min(sizes) <= 1
        combined = np.concatenate(parts)
        assert combined.size == n
        assert np.array_equal(np.sort(combined), np.arange(n))


def test_criterion_09_knn_agrees_with_nearest_centroid(run_a):
    run_dir, _ = run_a
    model_dir = run_dir / "cae"
    clusters = _load_rows(model_dir / "clusters.csv")
    latents = _load_rows(model_dir / "latents.csv")
    test_ids = sorted(int(r["window_id"]) for r in clusters if r["fold"] == "-1")
    assert test_ids
    val_cluster = {
        int(r["window_id"]): (int(r["cluster"]), r["is_noise"] == "1")
        for r in clusters if r["fold"] != "-1"
    }
    agree = 0
    total = 0
    for j in range(ingest.N_FOLDS):
        z = {
            int(r["window_id"]): (float(r["z1"]), float(r["z2"]))
            for r in latents if int(r["fold"]) == j
        }
        ref_ids = [w for w in z if w not in set(test_ids) and not val_cluster[w][1]]
        refs = np.array([z[w] for w in ref_ids])
        ref_labels = np.array([val_cluster[w][0] for w in ref_ids])
        k = min(5, refs.shape[0])
        if k % 2 == 0:
            k -= 1
        knn = cluster.knn_fit(refs, ref_labels, k)
        z_test = np.array([z[w] for w in test_ids])
        pred = cluster.knn_predict(knn, z_test)
        centroids = np.stack([refs[ref_labels == c].mean(axis=0) for c in (0, 1)])
        d = np.linalg.norm(z_test[:, None, :] - centroids[None, :, :], axis=2)
        nearest = d.argmin(axis=1)
        agree += int((pred == nearest).sum())
        total += len(test_ids)
    assert agree / total >= KNN_AGREEMENT_MIN


def test_criterion_10_reruns_are_byte_identical(run_a, run_b):
    for name in ("report.json", "latents.csv"):
        a = (run_a[0] / "cae" / name).read_bytes()
        b = (run_b / "cae" / name).read_bytes()
        assert a == b, name
