"""End-to-end orchestration: cohort -> windows -> features -> models -> report.

Stage order: ingest, split, features (with the K-means baseline), then per
selected model: 5-fold training, per-fold density clustering of the
validation latents, KNN labeling of the held-out test windows, and the
stress report with figures.

Cluster ids are comparable across folds because DBSCAN output is always
relabeled so cluster 0 is the larger one.  A test window is encoded by all
five fold models and its final label is the majority of the five KNN votes;
validation windows keep the DBSCAN label from their own fold (including
noise).  The report covers every window that ends up with a label.

All randomness flows from the root seed through named stage derivations, so
stage-level reruns agree with full runs and two identical invocations write
byte-identical report.json and latents.csv.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, analysis, autoenc, cluster, features as feat, figures, ingest, nnet
from .rng import derive_seed

MODELS = ("cae", "lae")

EPS_SWEEP_FACTORS = (0.5, 0.75, 1.0, 1.25, 1.5, 2.0, 3.0)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    cohort_dir: str
    out_dir: str
    seed: int = 0
    model: str = "cae"        # cae | lae | both
    epochs: int = 300
    batch_size: int = 64
    lr: float = 1e-4
    loss: str = "mae"
    scaling: str = "global"   # global min-max of the cohort | per-window
    eps: float | None = None  # None: knee of the k-distance curve, per fold
    min_pts: int = cluster.DEFAULT_MIN_PTS
    knn_k: int = cluster.DEFAULT_KNN_K
    alpha: float = analysis.DEFAULT_ALPHA
    winsor_min_ms: float = 300.0
    winsor_max_ms: float = 2000.0
    winsor_max_jump: float = 0.20

    def __post_init__(self) -> None:
        if self.model not in MODELS + ("both",):
            raise ValueError(f"model must be one of {MODELS + ('both',)}")
        if self.scaling not in ("window", "global"):
            raise ValueError("scaling must be 'window' or 'global'")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")

    def selected_models(self) -> list[str]:
        return list(MODELS) if self.model == "both" else [self.model]


@dataclass
class RunManifest:
    version: str
    seed: int
    config: dict
    config_sources: dict
    input_hashes: dict
    param_counts: dict = field(default_factory=dict)
    clustering: dict = field(default_factory=dict)
    kmeans_baseline: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    n_subjects: int = 0
    n_windows: int = 0

    def write(self, path: Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass
class ModelRunResult:
    name: str
    fold_results: list
    labels: np.ndarray          # final per-window labels, -1 noise
    window_fold: np.ndarray     # owning validation fold per window, -1 for test
    report: analysis.ClusterReport
    out_dir: Path


@dataclass
class RunResult:
    run_dir: Path
    manifest: RunManifest
    models: dict


def _hash_file(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def build_windows(
    cohort: list[ingest.RriSeries], clean_cfg: ingest.CleanConfig, scaling: str
) -> list[ingest.Window]:
    """Winsorize every series, cut windows, scale them.

    'global' scaling (the default) min-max scales with the cohort-wide min
    and max of the cleaned signal, which preserves each window's level; the
    level is what separates the regimes downstream.  'window' scaling uses
    per-window statistics instead, keeping only the shape.
    """
    windows: list[ingest.Window] = []
    for series in cohort:
        cleaned = ingest.winsorize(series, clean_cfg)
        windows.extend(ingest.windowize(cleaned))
    if scaling == "global":
        lo = min(float(w.raw.min()) for w in windows)
        hi = max(float(w.raw.max()) for w in windows)
        span = hi - lo
        for w in windows:
            scaled = (w.raw - lo) / span if span > 0 else np.zeros_like(w.raw)
            w.scaled = scaled
    return windows


def _impute_nonfinite(matrix: np.ndarray) -> tuple[np.ndarray, int]:
    """Replace non-finite feature entries (the lf_hf infinity sentinel) with
    the column's finite maximum so standardization stays defined."""
    x = matrix.copy()
    bad = ~np.isfinite(x)
    n_bad = int(bad.sum())
    if n_bad:
        for j in range(x.shape[1]):
            col_bad = bad[:, j]
            if col_bad.any():
                finite = x[~col_bad, j]
                fill = float(finite.max()) if finite.size else 0.0
                x[col_bad, j] = fill
    return x, n_bad


def _dbscan_two_clusters(
    latents: np.ndarray, cfg: PipelineConfig, where: str
) -> cluster.DbscanResult:
    eps = cfg.eps if cfg.eps is not None else cluster.knee_eps(latents, cfg.min_pts)
    result = cluster.dbscan(latents, eps, cfg.min_pts)
    if result.n_clusters != 2:
        sweep = []
        for f in EPS_SWEEP_FACTORS:
            r = cluster.dbscan(latents, eps * f, cfg.min_pts)
            sweep.append(f"eps={eps * f:.6g} -> {r.n_clusters} clusters, {r.n_noise} noise")
        raise StageError(
            "cluster",
            f"{where}: DBSCAN found {result.n_clusters} clusters at eps={eps:.6g} "
            f"(need exactly 2). Sweep: " + "; ".join(sweep),
        )
    return result


def run_pipeline(cfg: PipelineConfig, config_sources: dict | None = None) -> RunResult:
    run_dir = Path(cfg.out_dir) / f"run_seed{cfg.seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    def timed(stage):
        class _T:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timings[stage] = timings.get(stage, 0.0) + time.perf_counter() - self.t0

        return _T()

    # ingest
    cohort_dir = Path(cfg.cohort_dir)
    if not cohort_dir.is_dir():
        raise StageError("ingest", f"cohort directory not found: {cohort_dir}")
    with timed("ingest"):
        try:
            cohort = ingest.load_cohort(cohort_dir)
        except (ingest.RriParseError, OSError) as exc:
            raise StageError("ingest", str(exc)) from exc
        clean_cfg = ingest.CleanConfig(
            min_rr_ms=cfg.winsor_min_ms,
            max_rr_ms=cfg.winsor_max_ms,
            max_rel_jump=cfg.winsor_max_jump,
        )
        try:
            windows = build_windows(cohort, clean_cfg, cfg.scaling)
        except ingest.UnusableSeriesError as exc:
            raise StageError("ingest", str(exc)) from exc
    input_hashes = {
        f.name: _hash_file(f) for f in sorted(cohort_dir.glob("*.rri"))
    }

    manifest = RunManifest(
        version=__version__,
        seed=cfg.seed,
        config=asdict(cfg),
        config_sources=config_sources or {},
        input_hashes=input_hashes,
        n_subjects=len(cohort),
        n_windows=len(windows),
    )

    # split
    with timed("split"):
        try:
            split = ingest.make_split(len(windows), derive_seed(cfg.seed, "split"))
        except ValueError as exc:
            raise StageError("split", str(exc)) from exc

    # features + K-means baseline
    with timed("features"):
        fvs = [feat.features(w.raw) for w in windows]
        rows = [(w.source_subject, i, fv) for i, (w, fv) in enumerate(zip(windows, fvs))]
        feat.write_feature_csv(run_dir / "features.csv", rows)
        marker_sets = [
            feat.MarkerSet(
                rmssd=fv.rmssd, max_hr=60000.0 / fv.min_rr,
                mean_rr=fv.mean_rr, lf_hf=fv.lf_hf,
            )
            for fv in fvs
        ]
    with timed("kmeans"):
        matrix = np.stack([fv.as_point() for fv in fvs])
        matrix, n_imputed = _impute_nonfinite(matrix)
        km = cluster.kmeans(cluster.zscore(matrix), k=2, seed=derive_seed(cfg.seed, "kmeans"))
        with open(run_dir / "kmeans_baseline.csv", "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window_id", "cluster"])
            for i, lbl in enumerate(km.labels):
                writer.writerow([i, int(lbl)])
        sizes = [int(np.sum(km.labels == j)) for j in range(2)]
        manifest.kmeans_baseline = {
            "cluster_sizes": sizes, "inertia": km.inertia,
            "n_iter": km.n_iter, "n_imputed_features": n_imputed,
        }

    scaled = np.stack([w.scaled for w in windows])
    raw_markers = marker_sets
    test_idx = np.asarray(split.test_indices, dtype=np.int64)

    models: dict[str, ModelRunResult] = {}
    for name in cfg.selected_models():
        models[name] = _run_model(
            name, cfg, run_dir, split, scaled, raw_markers, test_idx, manifest, timed
        )

    manifest.timings = {k: round(v, 3) for k, v in timings.items()}
    manifest.write(run_dir / "manifest.json")
    return RunResult(run_dir=run_dir, manifest=manifest, models=models)


def _run_model(
    name: str,
    cfg: PipelineConfig,
    run_dir: Path,
    split: ingest.SplitPlan,
    scaled: np.ndarray,
    marker_sets: list,
    test_idx: np.ndarray,
    manifest: RunManifest,
    timed,
) -> ModelRunResult:
    out_dir = run_dir / name
    out_dir.mkdir(exist_ok=True)
    spec = autoenc.cae_spec() if name == "cae" else autoenc.lae_spec()
    manifest.param_counts[name] = spec.param_count
    train_cfg = autoenc.TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        loss=cfg.loss, seed=cfg.seed,
    )

    with timed(f"train_{name}"):
        fold_results = []
        for j in range(ingest.N_FOLDS):
            try:
                fr = autoenc.train_fold(spec, scaled, split, j, train_cfg)
            except FloatingPointError as exc:
                raise StageError("train", f"{name} fold {j}: {exc}") from exc
            fold_results.append(fr)
            nnet.save_checkpoint(out_dir / f"checkpoint_fold{j}.json", fr.params, fr.init_seed)

    n = scaled.shape[0]
    labels = np.full(n, cluster.NOISE, dtype=np.int64)
    window_fold = np.full(n, -1, dtype=np.int64)
    test_votes = np.zeros((len(fold_results), test_idx.size), dtype=np.int64)
    fold_cluster_info = {}
    test_latents_by_fold = []

    with timed(f"cluster_{name}"):
        for fr in fold_results:
            where = f"{name} fold {fr.fold_index}"
            db = _dbscan_two_clusters(fr.latents, cfg, where)
            labels[fr.val_indices] = db.labels
            window_fold[fr.val_indices] = fr.fold_index
            refs = fr.latents[db.labels != cluster.NOISE]
            ref_labels = db.labels[db.labels != cluster.NOISE]
            k = min(cfg.knn_k, refs.shape[0])
            if k % 2 == 0:
                k -= 1
            if k < 1:
                raise StageError("cluster", f"{where}: no non-noise reference points for KNN")
            knn = cluster.knn_fit(refs, ref_labels, k)
            z_test = autoenc.encode(spec, fr.params, scaled[test_idx])
            test_latents_by_fold.append(z_test)
            test_votes[fr.fold_index] = cluster.knn_predict(knn, z_test)
            fold_cluster_info[f"fold{fr.fold_index}"] = {
                "eps": db.eps, "min_pts": db.min_pts,
                "cluster_sizes": db.cluster_sizes, "n_noise": db.n_noise, "knn_k": k,
            }
        if test_idx.size:
            votes_for_1 = test_votes.sum(axis=0)
            labels[test_idx] = (2 * votes_for_1 > len(fold_results)).astype(np.int64)
    manifest.clustering[name] = fold_cluster_info

    with timed(f"report_{name}"):
        _write_loss_curves(out_dir / "loss_curve.csv", fold_results)
        _write_latents(out_dir / "latents.csv", fold_results, test_idx, test_latents_by_fold)
        _write_clusters(out_dir / "clusters.csv", labels, window_fold)
        extras = {
            "model": name,
            "param_count": spec.param_count,
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "loss": cfg.loss,
            "min_pts": cfg.min_pts,
            "knn_k": cfg.knn_k,
            "eps_per_fold": {
                f: info["eps"] for f, info in sorted(fold_cluster_info.items())
            },
            "untrained_val_loss_per_fold": {
                f"fold{fr.fold_index}": fr.untrained_val_loss for fr in fold_results
            },
            "final_val_loss_per_fold": {
                f"fold{fr.fold_index}": fr.final_val_loss for fr in fold_results
            },
        }
        try:
            report = analysis.build_report(marker_sets, labels, alpha=cfg.alpha, extras=extras)
        except ValueError as exc:
            raise StageError("report", f"{name}: {exc}") from exc
        analysis.write_report_json(out_dir / "report.json", report)
        analysis.write_markers_csv(
            out_dir / "markers.csv", range(len(marker_sets)), window_fold, marker_sets, labels
        )
        analysis.write_figure_data_csv(out_dir / "figure6_data.csv", report)

    with timed(f"figures_{name}"):
        figures.plot_loss_curves(out_dir / "loss_curves.png", fold_results)
        figures.plot_latents(
            out_dir / "latents.png", fold_results,
            labels, test_latents_by_fold, test_idx,
        )
        figures.plot_marker_comparison(out_dir / "markers.png", report)

    return ModelRunResult(
        name=name, fold_results=fold_results, labels=labels,
        window_fold=window_fold, report=report, out_dir=out_dir,
    )


def _write_loss_curves(path: Path, fold_results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "epoch", "val_loss"])
        for fr in fold_results:
            for epoch, v in enumerate(fr.val_curve):
                writer.writerow([fr.fold_index, epoch, repr(v)])


def _write_latents(path: Path, fold_results, test_idx, test_latents_by_fold) -> None:
    """latents.csv: validation windows once (their own fold), test windows
    once per fold model that encoded them; rows sorted by (fold, window_id)."""
    rows = []
    for fr in fold_results:
        for wid, z in zip(fr.val_indices, fr.latents):
            rows.append((int(fr.fold_index), int(wid), float(z[0]), float(z[1])))
        z_test = test_latents_by_fold[fr.fold_index]
        for wid, z in zip(test_idx, z_test):
            rows.append((int(fr.fold_index), int(wid), float(z[0]), float(z[1])))
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "z1", "z2", "fold"])
        for fold, wid, z1, z2 in rows:
            writer.writerow([wid, repr(z1), repr(z2), fold])


def _write_clusters(path: Path, labels, window_fold) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "fold", "cluster", "is_noise"])
        for i, (lbl, fold) in enumerate(zip(labels, window_fold)):
            writer.writerow([i, int(fold), int(lbl), int(lbl == cluster.NOISE)])


# ---------------------------------------------------------------------------
# synthetic cohorts


def make_mixed_cohort(
    out_dir, n_subjects: int, stressed_frac: float, seed: int, n_beats: int = 960
) -> Path:
    """Write a cohort mixing the two presets; the first round(frac*n) subjects
    get the stressed preset.  Ground-truth regimes land in labels.csv."""
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    if not 0.0 <= stressed_frac <= 1.0:
        raise ValueError("stressed fraction must be within [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_stressed = int(round(stressed_frac * n_subjects))
    rows = []
    series_list = []
    for i in range(n_subjects):
        regime = "stressed" if i < n_stressed else "calm"
        cfg = ingest.SynthConfig.preset(regime, n_subjects=n_subjects, seed=seed, n_beats=n_beats)
        subject_id = f"s{i:03d}"
        series_list.append(ingest.synth_rri_series(cfg, i, subject_id))
        rows.append((subject_id, regime))
    ingest.write_cohort(series_list, out)
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "regime"])
        writer.writerows(rows)
    return out
