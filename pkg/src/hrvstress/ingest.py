"""RRI ingestion: parsing, artifact cleanup, windowing, splits, synthetic cohorts.

File format: UTF-8 text, one RR interval in milliseconds per line, blank lines
and ``#`` comments ignored.  The filename stem is the subject id.  A cohort is
a directory of such files, one per subject.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .rng import SplitMix64, derive_seed

WINDOW_LEN = 30

TEST_FRACTION = 0.10
N_FOLDS = 5

# Regime presets for the synthetic generator.  Directions follow the
# established stress markers: a stressed heart beats faster (low mean RR),
# with suppressed vagal modulation (low beat-to-beat noise, small
# high-frequency amplitude) so RMSSD drops, and with a pronounced
# sympathetic low-frequency component so LF/HF rises.
CALM_PRESET = dict(mean_rr_ms=900.0, rr_sd_ms=5.0, lf_amp=2.0, hf_amp=15.0)
STRESSED_PRESET = dict(mean_rr_ms=650.0, rr_sd_ms=4.0, lf_amp=3.0, hf_amp=2.0)

LF_MOD_HZ = 0.1
HF_MOD_HZ = 0.25


class RriParseError(ValueError):
    """Malformed RRI text input."""


class UnusableSeriesError(ValueError):
    """Series cannot be cleaned (e.g. every sample is an outlier)."""


@dataclass
class RriSeries:
    """One subject's RR intervals in milliseconds, in acquisition order."""

    subject_id: str
    intervals: np.ndarray  # float64, all > 0

    @property
    def sample_count(self) -> int:
        return int(self.intervals.size)


@dataclass(frozen=True)
class CleanConfig:
    """Outlier rule for winsorization.

    A sample is an outlier if it falls outside [min_rr_ms, max_rr_ms] or
    deviates by more than max_rel_jump from the previous non-outlier sample.
    The bounds are standard physiological plausibility limits for RRI data.
    """

    min_rr_ms: float = 300.0
    max_rr_ms: float = 2000.0
    max_rel_jump: float = 0.20


@dataclass
class Window:
    """A 30-beat segment with raw (ms) and per-window min-max scaled views."""

    source_subject: str
    start_index: int
    raw: np.ndarray
    scaled: np.ndarray


@dataclass
class SplitPlan:
    """10% test holdout plus a 5-fold partition of the remaining windows."""

    seed: int
    test_indices: list[int]
    folds: list[list[int]]

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "test": self.test_indices, "folds": self.folds},
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        obj = json.loads(text)
        return cls(
            seed=int(obj["seed"]),
            test_indices=[int(i) for i in obj["test"]],
            folds=[[int(i) for i in f] for f in obj["folds"]],
        )


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic cohort parameters for one regime.

    Each beat k at cumulative time t (seconds) is

        rri_k = mean_rr + lf_amp*sin(2*pi*0.1*t) + hf_amp*sin(2*pi*0.25*t)
                + gaussian(0, rr_sd)

    with t advanced by rri_k/1000 after the draw.  Per-subject noise streams
    derive from (seed, subject index).
    """

    n_subjects: int
    regime: str  # "calm" | "stressed"
    mean_rr_ms: float
    rr_sd_ms: float
    lf_amp: float
    hf_amp: float
    seed: int
    n_beats: int = 960

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        if self.regime not in ("calm", "stressed"):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.mean_rr_ms <= 0:
            raise ValueError("mean_rr_ms must be positive")
        if self.rr_sd_ms < 0 or self.lf_amp < 0 or self.hf_amp < 0:
            raise ValueError("rr_sd_ms and modulation amplitudes must be >= 0")
        if self.n_beats <= 0:
            raise ValueError("n_beats must be positive")

    @classmethod
    def preset(cls, regime: str, n_subjects: int, seed: int, n_beats: int = 960) -> "SynthConfig":
        presets = {"calm": CALM_PRESET, "stressed": STRESSED_PRESET}
        if regime not in presets:
            raise ValueError(f"unknown regime {regime!r}")
        return cls(n_subjects=n_subjects, regime=regime, seed=seed, n_beats=n_beats,
                   **presets[regime])


def parse_rri(text: str, subject_id: str) -> RriSeries:
    """Parse one-interval-per-line text into an RriSeries.

    Blank lines and lines starting with ``#`` are skipped.  Raises
    RriParseError with the 1-based line number for non-numeric tokens and
    for non-positive intervals.
    """
    values = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            value = float(stripped)
        except ValueError:
            raise RriParseError(f"line {lineno}: non-numeric RR interval {stripped!r}") from None
        if not math.isfinite(value) or value <= 0:
            raise RriParseError(f"line {lineno}: RR interval must be a positive number, got {stripped!r}")
        values.append(value)
    return RriSeries(subject_id=subject_id, intervals=np.asarray(values, dtype=np.float64))


def load_cohort(cohort_dir: str) -> list[RriSeries]:
    """Read every *.rri file in a directory, sorted by filename."""
    names = sorted(n for n in os.listdir(cohort_dir) if n.endswith(".rri"))
    if not names:
        raise FileNotFoundError(f"no .rri files in {cohort_dir}")
    cohort = []
    for name in names:
        path = os.path.join(cohort_dir, name)
        with open(path, encoding="utf-8") as fh:
            cohort.append(parse_rri(fh.read(), subject_id=name[: -len(".rri")]))
    return cohort


def winsorize(series: RriSeries, cfg: CleanConfig = CleanConfig()) -> RriSeries:
    """Replace outlier samples with the value of the nearest-in-index non-outlier.

    Two-pass: first mark outliers (range rule, then relative jump against the
    last non-outlier), then copy each outlier from its nearest accepted sample
    (ties broken to the left).  Output length equals input length.  Raises
    UnusableSeriesError when no sample survives the marking pass.
    """
    x = series.intervals
    if x.size == 0:
        raise UnusableSeriesError(f"{series.subject_id}: empty series")

    good = np.zeros(x.size, dtype=bool)
    prev_good: float | None = None
    for i, v in enumerate(x):
        in_range = cfg.min_rr_ms <= v <= cfg.max_rr_ms
        small_jump = prev_good is None or abs(v - prev_good) <= cfg.max_rel_jump * prev_good
        if in_range and small_jump:
            good[i] = True
            prev_good = v

    if not good.any():
        raise UnusableSeriesError(f"{series.subject_id}: every sample is an outlier")
    if good.all():
        return RriSeries(series.subject_id, x.copy())

    good_idx = np.flatnonzero(good)
    cleaned = x.copy()
    for i in np.flatnonzero(~good):
        # nearest accepted index; on equal distance np.argmin takes the earlier one
        nearest = good_idx[np.argmin(np.abs(good_idx - i))]
        cleaned[i] = x[nearest]
    return RriSeries(series.subject_id, cleaned)


def scale_window(raw: np.ndarray) -> np.ndarray:
    """Per-window min-max scaling to [0, 1]; a constant window maps to all zeros."""
    lo = raw.min()
    hi = raw.max()
    if hi == lo:
        return np.zeros_like(raw)
    return (raw - lo) / (hi - lo)


def windowize(series: RriSeries) -> list[Window]:
    """Cut a cleaned series into non-overlapping 30-beat windows.

    The trailing remainder of fewer than 30 samples is discarded.  Fewer than
    30 samples total yields an empty list.
    """
    x = series.intervals
    out = []
    for start in range(0, x.size - WINDOW_LEN + 1, WINDOW_LEN):
        raw = x[start : start + WINDOW_LEN].copy()
        out.append(Window(
            source_subject=series.subject_id,
            start_index=start,
            raw=raw,
            scaled=scale_window(raw),
        ))
    return out


def make_split(n_windows: int, seed: int) -> SplitPlan:
    """Shuffle window indices and split into a 10% test set plus 5 folds.

    |test| = floor(0.10*n + 0.5) (round half up).  The remaining indices are
    dealt into 5 folds whose sizes differ by at most one.  The shuffle is the
    documented SplitMix64 Fisher-Yates (see rng module), so the plan is
    reproducible bit-exactly for a fixed (n_windows, seed).
    """
    if n_windows < 50:
        raise ValueError(f"need at least 50 windows to populate 5 folds, got {n_windows}")
    order = list(range(n_windows))
    SplitMix64(seed).shuffle(order)

    n_test = int(math.floor(TEST_FRACTION * n_windows + 0.5))
    test = sorted(order[:n_test])
    rest = order[n_test:]

    folds: list[list[int]] = []
    base, extra = divmod(len(rest), N_FOLDS)
    pos = 0
    for k in range(N_FOLDS):
        size = base + (1 if k < extra else 0)
        folds.append(sorted(rest[pos : pos + size]))
        pos += size
    return SplitPlan(seed=seed, test_indices=test, folds=folds)


def synth_rri_series(cfg: SynthConfig, subject_index: int, subject_id: str) -> RriSeries:
    """Generate one subject's series from the regime model (see SynthConfig)."""
    rng = np.random.default_rng(derive_seed(cfg.seed, f"synth/subject{subject_index}"))
    noise = rng.normal(0.0, cfg.rr_sd_ms, size=cfg.n_beats)
    intervals = np.empty(cfg.n_beats, dtype=np.float64)
    t = 0.0
    for k in range(cfg.n_beats):
        rri = (
            cfg.mean_rr_ms
            + cfg.lf_amp * math.sin(2.0 * math.pi * LF_MOD_HZ * t)
            + cfg.hf_amp * math.sin(2.0 * math.pi * HF_MOD_HZ * t)
            + noise[k]
        )
        rri = max(rri, 1.0)  # intervals must stay positive even at extreme configs
        intervals[k] = rri
        t += rri / 1000.0
    return RriSeries(subject_id=subject_id, intervals=intervals)


def synth_cohort(cfg: SynthConfig) -> list[RriSeries]:
    """Generate cfg.n_subjects series; deterministic given cfg.seed."""
    return [
        synth_rri_series(cfg, i, subject_id=f"{cfg.regime}{i:03d}")
        for i in range(cfg.n_subjects)
    ]


def write_cohort(cohort: list[RriSeries], out_dir: str) -> None:
    """Write one .rri file per series (one interval per line, repr precision)."""
    os.makedirs(out_dir, exist_ok=True)
    for series in cohort:
        path = os.path.join(out_dir, f"{series.subject_id}.rri")
        with open(path, "w", encoding="utf-8") as fh:
            for v in series.intervals:
                fh.write(f"{float(v)!r}\n")
