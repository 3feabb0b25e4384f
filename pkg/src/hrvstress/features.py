"""The 18 time- and frequency-domain HRV features plus the four stress markers.

Frequency features come from the classic tachogram route: linear interpolation
of RRI-vs-cumulative-time onto a uniform 4 Hz grid, mean subtraction, Welch
periodogram, trapezoidal band integration.  Band edges:

    VLF 0.003-0.04 Hz, LF 0.04-0.15 Hz, HF 0.15-0.4 Hz.

All arithmetic is float64.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields

import numpy as np
from scipy import signal as sp_signal

RESAMPLE_HZ = 4.0

VLF_BAND = (0.003, 0.04)
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)

NN50_THRESHOLD_MS = 50.0

# Export header spellings, in this order, for the feature matrix CSV.
FEATURE_COLUMNS = [
    "HFms", "HFnu", "HFpeak", "HFrel", "LF_HF", "LFms", "LFnu", "LFpeak",
    "LFrel", "MaxRR", "MeanHR", "MeanRR", "MinRR", "NN50", "RMSSD", "SDNN",
    "VLFms", "pNN50",
]


@dataclass
class FeatureVector:
    mean_rr: float  # ms
    min_rr: float   # ms
    max_rr: float   # ms
    sdnn: float     # ms, population form by default
    rmssd: float    # ms
    nn50: int
    pnn50: float    # %
    mean_hr: float  # bpm, mean of per-beat instantaneous rates
    vlf_ms: float   # ms^2
    lf_ms: float    # ms^2
    hf_ms: float    # ms^2
    lf_rel: float   # % of VLF+LF+HF
    hf_rel: float   # %
    lf_nu: float    # % of LF+HF
    hf_nu: float    # %
    lf_peak: float  # Hz
    hf_peak: float  # Hz
    lf_hf: float    # ratio; +inf sentinel when hf_ms == 0

    def as_row(self) -> dict[str, float]:
        """Map onto the export column spellings."""
        return {
            "HFms": self.hf_ms, "HFnu": self.hf_nu, "HFpeak": self.hf_peak,
            "HFrel": self.hf_rel, "LF_HF": self.lf_hf, "LFms": self.lf_ms,
            "LFnu": self.lf_nu, "LFpeak": self.lf_peak, "LFrel": self.lf_rel,
            "MaxRR": self.max_rr, "MeanHR": self.mean_hr, "MeanRR": self.mean_rr,
            "MinRR": self.min_rr, "NN50": self.nn50, "RMSSD": self.rmssd,
            "SDNN": self.sdnn, "VLFms": self.vlf_ms, "pNN50": self.pnn50,
        }

    def as_point(self) -> np.ndarray:
        """Feature values in FEATURE_COLUMNS order, for clustering."""
        row = self.as_row()
        return np.array([row[c] for c in FEATURE_COLUMNS], dtype=np.float64)


@dataclass
class MarkerSet:
    """The four literature markers compared across clusters."""

    rmssd: float   # ms
    max_hr: float  # bpm, 60000 / min RR of the window
    mean_rr: float # ms
    lf_hf: float   # ratio

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


MARKER_NAMES = ["rmssd", "max_hr", "mean_rr", "lf_hf"]


@dataclass
class Psd:
    freqs: np.ndarray   # Hz, strictly increasing
    power: np.ndarray   # ms^2/Hz, >= 0


def time_domain(raw: np.ndarray, sdnn_population: bool = True) -> dict[str, float]:
    """Time-domain statistics of one raw window (>= 2 samples).

    sdnn uses the population (divide-by-n) form by default; pass
    sdnn_population=False for the sample form.  NN50 counts successive
    differences strictly greater than 50 ms.
    """
    rr = np.asarray(raw, dtype=np.float64)
    if rr.size < 2:
        raise ValueError("time-domain features need at least 2 samples")
    diffs = np.diff(rr)
    nn50 = int(np.sum(np.abs(diffs) > NN50_THRESHOLD_MS))
    return {
        "mean_rr": float(np.mean(rr)),
        "min_rr": float(np.min(rr)),
        "max_rr": float(np.max(rr)),
        "sdnn": float(np.std(rr, ddof=0 if sdnn_population else 1)),
        "rmssd": float(np.sqrt(np.mean(diffs ** 2))),
        "nn50": nn50,
        "pnn50": 100.0 * nn50 / diffs.size,
        "mean_hr": float(np.mean(60000.0 / rr)),
    }


def resample_evenly(raw: np.ndarray, rate_hz: float = RESAMPLE_HZ) -> np.ndarray:
    """Interpolate the tachogram onto a uniform grid and subtract the mean.

    Beat i sits at cumulative time t_i = sum(rr[0..i]) / 1000 seconds; the grid
    runs from t_0 to t_last in steps of 1/rate_hz.
    """
    rr = np.asarray(raw, dtype=np.float64)
    if rr.size < 2:
        raise ValueError("resampling needs at least 2 samples")
    if rate_hz <= 0:
        raise ValueError("rate_hz must be positive")
    t = np.cumsum(rr) / 1000.0
    n_grid = int(math.floor((t[-1] - t[0]) * rate_hz)) + 1
    grid = t[0] + np.arange(n_grid) / rate_hz
    tach = np.interp(grid, t, rr)
    return tach - tach.mean()


def welch_psd(tachogram: np.ndarray, rate_hz: float = RESAMPLE_HZ) -> Psd:
    """Hann-windowed, 50%-overlap Welch estimate; segment length min(256, n).

    Density scaling, so trapezoidal integration over a band yields ms^2.
    """
    x = np.asarray(tachogram, dtype=np.float64)
    if x.size < 8:
        raise ValueError(f"tachogram too short for spectral estimation ({x.size} < 8)")
    nperseg = min(256, x.size)
    freqs, power = sp_signal.welch(
        x, fs=rate_hz, window="hann", nperseg=nperseg, noverlap=nperseg // 2,
        detrend=False, scaling="density",
    )
    return Psd(freqs=freqs, power=power)


def _band_mask(freqs: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    return (freqs >= band[0]) & (freqs <= band[1])


def _band_power(psd: Psd, band: tuple[float, float]) -> float:
    mask = _band_mask(psd.freqs, band)
    if mask.sum() < 2:
        return 0.0
    return float(np.trapezoid(psd.power[mask], psd.freqs[mask]))


def _band_peak(psd: Psd, band: tuple[float, float]) -> float:
    mask = _band_mask(psd.freqs, band)
    if not mask.any():
        return band[0]
    in_band = np.flatnonzero(mask)
    return float(psd.freqs[in_band[np.argmax(psd.power[in_band])]])


def freq_domain(psd: Psd) -> dict[str, float]:
    """Band powers, relative/normalized shares, band peaks, and LF/HF ratio.

    hf_ms == 0 yields the +inf sentinel for lf_hf (callers exclude and count
    it); a fully empty spectrum yields 0 for the normalized shares.
    """
    if psd.freqs[0] > VLF_BAND[0] or psd.freqs[-1] < HF_BAND[1]:
        raise ValueError("PSD does not cover the 0.003-0.4 Hz analysis range")
    vlf = _band_power(psd, VLF_BAND)
    lf = _band_power(psd, LF_BAND)
    hf = _band_power(psd, HF_BAND)
    total = vlf + lf + hf
    lf_plus_hf = lf + hf
    if hf > 0:
        lf_hf = lf / hf
    elif lf > 0:
        lf_hf = math.inf
    else:
        lf_hf = 0.0
    return {
        "vlf_ms": vlf,
        "lf_ms": lf,
        "hf_ms": hf,
        "lf_rel": 100.0 * lf / total if total > 0 else 0.0,
        "hf_rel": 100.0 * hf / total if total > 0 else 0.0,
        "lf_nu": 100.0 * lf / lf_plus_hf if lf_plus_hf > 0 else 0.0,
        "hf_nu": 100.0 * hf / lf_plus_hf if lf_plus_hf > 0 else 0.0,
        "lf_peak": _band_peak(psd, LF_BAND),
        "hf_peak": _band_peak(psd, HF_BAND),
        "lf_hf": lf_hf,
    }


def features(raw: np.ndarray) -> FeatureVector:
    """All 18 features of one raw window."""
    td = time_domain(raw)
    fd = freq_domain(welch_psd(resample_evenly(raw)))
    return FeatureVector(**td, **fd)


def markers(raw: np.ndarray) -> MarkerSet:
    """The four stress markers of one raw window."""
    td = time_domain(raw)
    fd = freq_domain(welch_psd(resample_evenly(raw)))
    return MarkerSet(
        rmssd=td["rmssd"],
        max_hr=60000.0 / td["min_rr"],
        mean_rr=td["mean_rr"],
        lf_hf=fd["lf_hf"],
    )


def write_feature_csv(path: str, rows: list[tuple[str, int, FeatureVector]]) -> None:
    """Feature matrix: subject_id, window_id, then the 18 named columns."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "window_id"] + FEATURE_COLUMNS)
        for subject_id, window_id, fv in rows:
            row = fv.as_row()
            writer.writerow([subject_id, window_id] + [repr(row[c]) for c in FEATURE_COLUMNS])
