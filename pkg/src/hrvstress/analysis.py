"""Cluster interpretation: marker statistics, Welch t-tests, stress labels.

The decision rule encodes the physiological reading: a cluster is `stressed`
only when it shows BOTH lower mean RMSSD AND higher mean LF/HF than the other
cluster, with both differences significant at the configured threshold.  The
other cluster is then `normal`; in every other case both clusters stay
`undetermined`.  Max-HR and Mean-RR are reported but carry no weight in the
rule.

LF/HF can be +inf when a window has no HF power at all; such windows are
excluded from that marker's statistics and test, and the exclusion count is
reported.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import stdtr

from .cluster import NOISE
from .features import MARKER_NAMES, MarkerSet

DEFAULT_ALPHA = 0.05

STRESSED = "stressed"
NORMAL = "normal"
UNDETERMINED = "undetermined"

# Markers that drive the stress assignment, with the direction a stressed
# cluster must show relative to the other cluster.
BINDING_MARKERS = {"rmssd": "lower", "lf_hf": "higher"}


@dataclass
class MarkerStats:
    marker: str
    cluster: int
    mean: float
    sd: float
    n: int
    n_excluded: int = 0


@dataclass
class TTestResult:
    marker: str
    t: float
    df: float
    p: float


def welch_ttest(sample_a: np.ndarray, sample_b: np.ndarray, marker: str = "") -> TTestResult:
    """Unequal-variance two-sample t-test, two-sided p.

    Degrees of freedom follow Welch-Satterthwaite.  Raises on samples too
    small or jointly constant, where the statistic is undefined.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("both samples need at least 2 values")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va + vb == 0.0:
        raise ValueError("degenerate variance: both samples are constant")
    sa = va / a.size
    sb = vb / b.size
    t = (a.mean() - b.mean()) / math.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = 2.0 * float(stdtr(df, -abs(t)))
    return TTestResult(marker=marker, t=float(t), df=float(df), p=min(p, 1.0))


@dataclass
class ClusterReport:
    stats: dict = field(default_factory=dict)        # marker -> {cluster -> MarkerStats}
    tests: dict = field(default_factory=dict)        # marker -> TTestResult | None
    test_notes: dict = field(default_factory=dict)   # marker -> why a test is unavailable
    assignment: dict = field(default_factory=dict)   # cluster -> label string
    rationale: list[str] = field(default_factory=list)
    cluster_sizes: dict = field(default_factory=dict)
    cluster_fractions: dict = field(default_factory=dict)
    n_points: int = 0
    n_noise: int = 0
    noise_fraction: float = 0.0
    alpha: float = DEFAULT_ALPHA
    extras: dict = field(default_factory=dict)       # run metadata merged into report.json

    def to_jsonable(self) -> dict:
        return {
            "alpha": self.alpha,
            "n_points": self.n_points,
            "n_noise": self.n_noise,
            "noise_fraction": self.noise_fraction,
            "cluster_sizes": {str(c): n for c, n in sorted(self.cluster_sizes.items())},
            "cluster_fractions": {str(c): f for c, f in sorted(self.cluster_fractions.items())},
            "markers": {
                m: {
                    str(c): {
                        "mean": st.mean, "sd": st.sd, "n": st.n, "n_excluded": st.n_excluded,
                    }
                    for c, st in sorted(self.stats[m].items())
                }
                for m in MARKER_NAMES
            },
            "tests": {
                m: (
                    {"t": r.t, "df": r.df, "p": r.p}
                    if (r := self.tests.get(m)) is not None
                    else {"unavailable": self.test_notes.get(m, "not computed")}
                )
                for m in MARKER_NAMES
            },
            "assignment": {str(c): lbl for c, lbl in sorted(self.assignment.items())},
            "rationale": self.rationale,
            "extras": self.extras,
        }


def _marker_samples(markers: list[MarkerSet], labels: np.ndarray, marker: str, cluster: int):
    values = np.array([getattr(m, marker) for m in markers], dtype=np.float64)
    sel = values[labels == cluster]
    finite = sel[np.isfinite(sel)]
    return finite, int(sel.size - finite.size)


def label_stress(
    stats: dict, tests: dict, alpha: float = DEFAULT_ALPHA
) -> tuple[dict, list[str]]:
    """Apply the direction-and-significance rule to two clusters' stats."""
    assignment = {0: UNDETERMINED, 1: UNDETERMINED}
    rationale: list[str] = []
    for marker, direction in BINDING_MARKERS.items():
        per_cluster = stats.get(marker, {})
        if 0 in per_cluster and 1 in per_cluster:
            m0, m1 = per_cluster[0].mean, per_cluster[1].mean
            test = tests.get(marker)
            p_txt = f"p={test.p:.3g}" if test is not None else "test unavailable"
            rationale.append(
                f"{marker}: cluster 0 mean {m0:.4g}, cluster 1 mean {m1:.4g} ({p_txt})"
            )
    for candidate in (0, 1):
        other = 1 - candidate
        ok = True
        for marker, direction in BINDING_MARKERS.items():
            per_cluster = stats.get(marker, {})
            test = tests.get(marker)
            if candidate not in per_cluster or other not in per_cluster or test is None:
                ok = False
                break
            lo, hi = per_cluster[candidate].mean, per_cluster[other].mean
            if direction == "lower" and not lo < hi:
                ok = False
            if direction == "higher" and not lo > hi:
                ok = False
            if not (test.p < alpha):
                ok = False
            if not ok:
                break
        if ok:
            assignment[candidate] = STRESSED
            assignment[other] = NORMAL
            rationale.append(
                f"cluster {candidate} marked stressed: lower rmssd and higher lf_hf, "
                f"both significant at alpha={alpha}"
            )
            break
    if STRESSED not in assignment.values():
        rationale.append("no cluster satisfies the stress rule; both undetermined")
    return assignment, rationale


def build_report(
    markers: list[MarkerSet],
    labels: np.ndarray,
    alpha: float = DEFAULT_ALPHA,
    extras: dict | None = None,
) -> ClusterReport:
    """Assemble the full two-cluster report from per-window markers and labels.

    labels holds 0/1 cluster ids with -1 for noise; noise contributes only to
    the noise fraction.  A cluster with fewer than 2 usable values for a
    marker leaves that marker's test unavailable (noted), never fabricated.
    """
    lab = np.asarray(labels, dtype=np.int64)
    if len(markers) != lab.size:
        raise ValueError("markers and labels differ in length")
    present = sorted(set(lab[lab != NOISE].tolist()))
    if present != [0, 1]:
        raise ValueError(f"need exactly clusters 0 and 1, got {present}")

    report = ClusterReport(alpha=alpha, extras=extras or {})
    report.n_points = int(lab.size)
    report.n_noise = int(np.sum(lab == NOISE))
    report.noise_fraction = report.n_noise / lab.size
    for c in (0, 1):
        n_c = int(np.sum(lab == c))
        report.cluster_sizes[c] = n_c
        report.cluster_fractions[c] = n_c / lab.size

    for marker in MARKER_NAMES:
        report.stats[marker] = {}
        samples = {}
        for c in (0, 1):
            finite, n_excl = _marker_samples(markers, lab, marker, c)
            samples[c] = finite
            report.stats[marker][c] = MarkerStats(
                marker=marker,
                cluster=c,
                mean=float(finite.mean()) if finite.size else math.nan,
                sd=float(finite.std(ddof=1)) if finite.size > 1 else math.nan,
                n=int(finite.size),
                n_excluded=n_excl,
            )
        if samples[0].size < 2 or samples[1].size < 2:
            report.tests[marker] = None
            report.test_notes[marker] = (
                f"fewer than 2 usable values in a cluster "
                f"(n0={samples[0].size}, n1={samples[1].size})"
            )
        else:
            try:
                report.tests[marker] = welch_ttest(samples[0], samples[1], marker)
            except ValueError as exc:
                report.tests[marker] = None
                report.test_notes[marker] = str(exc)

    report.assignment, report.rationale = label_stress(report.stats, report.tests, alpha)
    return report


# ---------------------------------------------------------------------------
# exports


def write_report_json(path, report: ClusterReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_jsonable(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_markers_csv(path, window_ids, folds, markers: list[MarkerSet], labels) -> None:
    """Per-window marker values with cluster labels."""
    lab = np.asarray(labels, dtype=np.int64)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "fold", "cluster", "is_noise"] + MARKER_NAMES)
        for wid, fold, mk, c in zip(window_ids, folds, markers, lab):
            row = mk.as_dict()
            writer.writerow(
                [wid, fold, int(c), int(c == NOISE)] + [repr(row[m]) for m in MARKER_NAMES]
            )


def write_figure_data_csv(path, report: ClusterReport) -> None:
    """Per-cluster means and error bars plus p-values, one marker per row;
    the numbers behind a bar-chart comparison of the two clusters."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["marker", "cluster0_mean", "cluster0_sd", "cluster0_n",
             "cluster1_mean", "cluster1_sd", "cluster1_n", "t", "df", "p"]
        )
        for marker in MARKER_NAMES:
            s0 = report.stats[marker][0]
            s1 = report.stats[marker][1]
            test = report.tests.get(marker)
            tail = [repr(test.t), repr(test.df), repr(test.p)] if test else ["", "", ""]
            writer.writerow(
                [marker, repr(s0.mean), repr(s0.sd), s0.n,
                 repr(s1.mean), repr(s1.sd), s1.n] + tail
            )
