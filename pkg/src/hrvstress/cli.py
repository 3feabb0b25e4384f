"""Command-line interface.

Subcommands:

  synth     write a synthetic RRI cohort (mixed calm/stressed presets)
  run       full pipeline: ingest -> features -> train -> cluster -> report
  features  feature extraction only, to a CSV
  encode    encode a cohort's windows with a saved checkpoint
  report    rebuild the stress report and marker figure from run artifacts

`run` resolves its configuration as CLI flags > --config JSON file >
defaults, and records the provenance of every key in the manifest.

Exit codes: 0 on success (for `run`: pipeline completed and every fold's
density clustering found exactly two clusters), 1 on stage failures, 2 on
usage errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, autoenc, features as feat, figures, ingest, nnet, pipeline

logger = logging.getLogger("hrvstress")

CONFIG_KEYS = [
    f.name for f in dataclasses.fields(pipeline.PipelineConfig)
    if f.name not in ("cohort_dir", "out_dir")
]


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"must be within [0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hrvstress",
        description="Unsupervised stress detection on RR-interval data.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--out", required=True, help="cohort directory to create")
    p.add_argument("--subjects", type=_positive_int, required=True)
    p.add_argument("--stressed-frac", type=_fraction, default=0.9,
                   help="fraction of subjects drawn from the stressed preset (default 0.9)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beats", type=_positive_int, default=960,
                   help="beats per subject (default 960 = 32 windows)")

    p = sub.add_parser("run", help="run the full pipeline")
    p.add_argument("--cohort", required=True, help="directory of .rri files")
    p.add_argument("--out", required=True, help="parent directory for the run directory")
    p.add_argument("--config", help="JSON file with configuration keys")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--model", choices=["cae", "lae", "both"], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=_positive_int, default=None, dest="batch_size")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--loss", choices=["mae", "mse"], default=None)
    p.add_argument("--scaling", choices=["window", "global"], default=None)
    p.add_argument("--eps", type=float, default=None,
                   help="DBSCAN eps (default: k-distance knee per fold)")
    p.add_argument("--min-pts", type=_positive_int, default=None, dest="min_pts")
    p.add_argument("--knn-k", type=_positive_int, default=None, dest="knn_k")
    p.add_argument("--alpha", type=float, default=None,
                   help="significance threshold for the stress rule")

    p = sub.add_parser("features", help="extract the 18-feature matrix")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("encode", help="encode windows with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--scaling", choices=["window", "global"], default="global")

    p = sub.add_parser("report", help="rebuild report.json and the marker figure")
    p.add_argument("--model-dir", required=True,
                   help="a run's model directory (holds markers.csv)")
    p.add_argument("--alpha", type=float, default=analysis.DEFAULT_ALPHA)
    return parser


def _resolve_run_config(args) -> tuple[pipeline.PipelineConfig, dict]:
    defaults = {
        f.name: f.default for f in dataclasses.fields(pipeline.PipelineConfig)
        if f.name in CONFIG_KEYS
    }
    resolved = dict(defaults)
    sources = {k: "default" for k in resolved}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            file_cfg = json.load(fh)
        unknown = sorted(set(file_cfg) - set(CONFIG_KEYS))
        if unknown:
            raise ValueError(f"unknown config keys in {args.config}: {', '.join(unknown)}")
        for k, v in file_cfg.items():
            resolved[k] = v
            sources[k] = "file"
    for k in CONFIG_KEYS:
        v = getattr(args, k, None)
        if v is not None:
            resolved[k] = v
            sources[k] = "cli"
    cfg = pipeline.PipelineConfig(cohort_dir=args.cohort, out_dir=args.out, **resolved)
    return cfg, sources


def _build_windows_for(cohort_dir: str, scaling: str = "global") -> list[ingest.Window]:
    cohort = ingest.load_cohort(cohort_dir)
    return pipeline.build_windows(cohort, ingest.CleanConfig(), scaling)


def cmd_synth(args) -> int:
    out = pipeline.make_mixed_cohort(
        args.out, args.subjects, args.stressed_frac, args.seed, n_beats=args.beats
    )
    logger.info("wrote %d subjects to %s", args.subjects, out)
    print(out)
    return 0


def cmd_run(args) -> int:
    cfg, sources = _resolve_run_config(args)
    result = pipeline.run_pipeline(cfg, config_sources=sources)
    for name, model in result.models.items():
        rep = model.report
        frac = ", ".join(
            f"cluster {c}: {rep.cluster_fractions[c]:.1%}" for c in sorted(rep.cluster_fractions)
        )
        print(f"{name}: {frac}, noise {rep.noise_fraction:.1%}")
        print(f"{name}: assignment {rep.assignment}")
    print(result.run_dir)
    return 0


def cmd_features(args) -> int:
    windows = _build_windows_for(args.cohort)
    rows = [(w.source_subject, i, feat.features(w.raw)) for i, w in enumerate(windows)]
    feat.write_feature_csv(args.out, rows)
    logger.info("wrote %d feature rows to %s", len(rows), args.out)
    return 0


def cmd_encode(args) -> int:
    params, _, _ = nnet.load_checkpoint(args.checkpoint)
    spec = autoenc.spec_from_params(params)
    windows = _build_windows_for(args.cohort, args.scaling)
    scaled = np.stack([w.scaled for w in windows])
    latents = autoenc.encode(spec, params, scaled)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "z1", "z2", "fold"])
        for i, z in enumerate(latents):
            writer.writerow([i, repr(float(z[0])), repr(float(z[1])), -1])
    logger.info("encoded %d windows with the %s checkpoint", len(windows), spec.name)
    return 0


def cmd_report(args) -> int:
    model_dir = Path(args.model_dir)
    markers_path = model_dir / "markers.csv"
    if not markers_path.is_file():
        raise FileNotFoundError(f"{markers_path} not found")
    marker_sets = []
    labels = []
    with open(markers_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            marker_sets.append(feat.MarkerSet(
                rmssd=float(row["rmssd"]), max_hr=float(row["max_hr"]),
                mean_rr=float(row["mean_rr"]), lf_hf=float(row["lf_hf"]),
            ))
            labels.append(int(row["cluster"]))
    report = analysis.build_report(
        marker_sets, np.asarray(labels), alpha=args.alpha,
        extras={"regenerated_from": str(markers_path)},
    )
    analysis.write_report_json(model_dir / "report.json", report)
    analysis.write_figure_data_csv(model_dir / "figure6_data.csv", report)
    figures.plot_marker_comparison(model_dir / "markers.png", report)
    print(f"assignment: {report.assignment}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    handlers = {
        "synth": cmd_synth,
        "run": cmd_run,
        "features": cmd_features,
        "encode": cmd_encode,
        "report": cmd_report,
    }
    try:
        return handlers[args.command](args)
    except pipeline.StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, nnet.CheckpointError, ingest.RriParseError,
            ingest.UnusableSeriesError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
