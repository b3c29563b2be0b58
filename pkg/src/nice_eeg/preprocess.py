"""Signal conditioning for epoched EEG.

All operations return new :class:`EEGEpochSet` objects and never touch their
input. Filtering is done by masking FFT coefficients, which is zero-phase and
reproducible bit-for-bit across platforms sharing a numpy build.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data_io import EEGEpochSet


class MappingError(KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class BandSpec:
    name: str
    lo: float
    hi: float

    def __post_init__(self):
        if not 0 <= self.lo < self.hi:
            raise ValueError(f"band {self.name}: need 0 <= lo < hi, got {self.lo}, {self.hi}")


BANDS = {
    "delta": BandSpec("delta", 0.5, 4.0),
    "theta": BandSpec("theta", 4.0, 8.0),
    "alpha": BandSpec("alpha", 8.0, 13.0),
    "beta": BandSpec("beta", 13.0, 30.0),
    "gamma": BandSpec("gamma", 30.0, 100.0),
}

REGION_PREFIXES = {
    "frontal": ("Fp", "AF", "F"),
    "central": ("FC", "C", "CP"),
    "temporal": ("FT", "T", "TP"),
    "parietal": ("P",),
    "occipital": ("PO", "O"),
}
REGIONS = tuple(REGION_PREFIXES)


@dataclass
class WhitenOp:
    matrix: np.ndarray
    shrinkage: float
    source: str = ""

    def to_dict(self):
        return {"matrix": self.matrix.tolist(), "shrinkage": self.shrinkage, "source": self.source}


def baseline_correct(x: EEGEpochSet, pre_ms: float = 200.0, baseline_means=None) -> EEGEpochSet:
    """Subtract each trial/channel's mean over the ``pre_ms`` before onset.

    Epochs must start at least ``pre_ms`` before onset (``tmin``), unless
    ``baseline_means`` of shape (n_trials, C) is supplied.
    """
    if baseline_means is None:
        times = x.times
        window = (times >= -pre_ms / 1000.0 - 1e-9) & (times < 0)
        if x.tmin > -pre_ms / 1000.0 + 1e-9 or not window.any():
            raise ValueError(
                f"epochs start at {x.tmin * 1000:.0f} ms; a {pre_ms:.0f} ms pre-stimulus "
                "segment or explicit baseline means are required")
        baseline_means = x.epochs[:, :, window].mean(axis=2)
    baseline_means = np.asarray(baseline_means)
    if baseline_means.shape != x.epochs.shape[:2]:
        raise ValueError(f"baseline means shape {baseline_means.shape} != {x.epochs.shape[:2]}")
    out = x.epochs - baseline_means[:, :, None].astype(x.epochs.dtype)
    return x.with_epochs(out)


def crop(x: EEGEpochSet, tmin: float = 0.0, tmax: float | None = None) -> EEGEpochSet:
    """Keep samples with ``tmin <= time < tmax`` (seconds)."""
    times = x.times
    keep = times >= tmin - 1e-9
    if tmax is not None:
        keep &= times < tmax - 1e-9
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        raise ValueError("crop window contains no samples")
    return x.with_epochs(x.epochs[:, :, idx[0]:idx[-1] + 1], tmin=float(times[idx[0]]))


def _fft_mask(x, rate, keep):
    n = x.shape[-1]
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec = np.fft.rfft(x, axis=-1)
    spec[..., ~keep(freqs)] = 0
    return np.fft.irfft(spec, n=n, axis=-1)


def downsample(x: EEGEpochSet, target_hz: float = 250.0) -> EEGEpochSet:
    """FFT low-pass below ``target_hz / 2`` followed by integer decimation."""
    ratio = x.sample_rate / target_hz
    step = int(round(ratio))
    if step < 1 or abs(ratio - step) > 1e-9:
        raise ValueError(f"{x.sample_rate} Hz is not an integer multiple of {target_hz} Hz")
    if step == 1:
        return x.with_epochs(x.epochs.copy())
    nyq = target_hz / 2.0
    filtered = _fft_mask(x.epochs, x.sample_rate, lambda f: f < nyq)
    out = filtered[:, :, ::step].astype(x.epochs.dtype)
    return x.with_epochs(out, sample_rate=float(target_hz))


def bandpass(x: EEGEpochSet, band: BandSpec) -> EEGEpochSet:
    """Zero every FFT coefficient whose frequency lies outside ``[lo, hi]``."""
    nyq = x.sample_rate / 2.0
    if band.hi > nyq:
        raise ValueError(f"band {band.name} ({band.lo}-{band.hi} Hz) exceeds Nyquist {nyq} Hz")
    out = _fft_mask(x.epochs, x.sample_rate, lambda f: (f >= band.lo) & (f <= band.hi))
    return x.with_epochs(out.astype(x.epochs.dtype))


def fit_whitener(x: EEGEpochSet, shrinkage: float = 0.1) -> WhitenOp:
    """Noise-normalisation matrix from trial-averaged channel covariance.

    The covariance of each trial is taken over its time samples, averaged
    across trials, shrunk toward its diagonal, and inverted to the power -1/2.
    """
    n, C, T = x.epochs.shape
    if C < 2:
        raise ValueError("whitening needs at least two channels")
    if n * T <= C:
        raise ValueError("not enough samples to estimate a channel covariance")
    if not 0 <= shrinkage <= 1:
        raise ValueError("shrinkage must lie in [0, 1]")
    data = x.epochs.astype(np.float64)
    centred = data - data.mean(axis=2, keepdims=True)
    cov = np.einsum("nct,ndt->cd", centred, centred) / (n * max(T - 1, 1))
    cov = (1 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    evals, evecs = np.linalg.eigh(cov)
    if evals.min() <= evals.max() * 1e-12:
        raise np.linalg.LinAlgError(
            "shrunk covariance is singular; increase the shrinkage parameter")
    W = (evecs / np.sqrt(evals)) @ evecs.T
    W = 0.5 * (W + W.T)
    return WhitenOp(W, shrinkage, f"fit on {n} trials x {T} samples")


def apply_whitener(op: WhitenOp, x: EEGEpochSet) -> EEGEpochSet:
    if op.matrix.shape[0] != x.epochs.shape[1]:
        raise ValueError("whitener channel count does not match epochs")
    out = np.einsum("cd,ndt->nct", op.matrix, x.epochs.astype(np.float64))
    return x.with_epochs(out.astype(x.epochs.dtype))


def average_repetitions(x: EEGEpochSet, n_reps: int | None = None) -> EEGEpochSet:
    """One trial per stimulus: the mean of its first ``n_reps`` repetitions
    (ordered by repetition index), or of all of them."""
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(x.stimulus_ids):
        groups.setdefault(s, []).append(i)
    out, stim, conc = [], [], []
    for s, idx in groups.items():
        idx = sorted(idx, key=lambda i: x.repetition_index[i])
        if n_reps is not None:
            if n_reps < 1 or n_reps > len(idx):
                raise ValueError(f"stimulus {s!r} has {len(idx)} repetitions, {n_reps} requested")
            idx = idx[:n_reps]
        out.append(x.epochs[idx].mean(axis=0))
        stim.append(s)
        conc.append(x.concept_ids[idx[0]])
    return EEGEpochSet(np.stack(out).astype(x.epochs.dtype), x.sample_rate, x.channel_names,
                       stim, conc, np.zeros(len(stim), dtype=np.int64), x.tmin)


def mask_time_window(x: EEGEpochSet, keep: tuple[float, float]) -> EEGEpochSet:
    """Zero every sample outside ``[start_ms, end_ms)`` relative to the first sample."""
    start, end = keep
    duration = x.n_samples / x.sample_rate * 1000.0
    if not (0 <= start < end <= duration + 1e-9):
        raise ValueError(f"time window {keep} ms invalid for a {duration:.0f} ms epoch")
    t_ms = np.arange(x.n_samples) / x.sample_rate * 1000.0
    inside = (t_ms >= start - 1e-9) & (t_ms < end - 1e-9)
    out = np.where(inside, x.epochs, 0).astype(x.epochs.dtype)
    return x.with_epochs(out)


def load_region_map(path) -> dict[str, str]:
    table = json.loads(Path(path).read_text())
    bad = {lab: reg for lab, reg in table.items() if reg not in REGIONS}
    if bad:
        raise MappingError(f"unknown regions in map: {bad}")
    return table


def region_of(label: str, overrides: dict[str, str] | None = None) -> str | None:
    """Scalp region from a 10-10 label, longest matching prefix first."""
    if overrides and label in overrides:
        return overrides[label]
    best, best_len = None, 0
    for region, prefixes in REGION_PREFIXES.items():
        for p in prefixes:
            if label.startswith(p) and len(p) > best_len:
                # "Fp1" must stay frontal, "FC1" central, "FT7" temporal
                rest = label[len(p):]
                if rest and rest[0].isalpha() and rest[0].isupper():
                    continue
                best, best_len = region, len(p)
    return best


def region_channels(channel_names, region, overrides=None) -> list[str]:
    return [ch for ch in channel_names if region_of(ch, overrides) == region]


def ablate_electrodes(x: EEGEpochSet, region, overrides=None) -> EEGEpochSet:
    """Zero a region's channels (by name) or an explicit list of channel labels."""
    if isinstance(region, str):
        if region not in REGIONS:
            raise MappingError(f"unknown region {region!r}; expected one of {REGIONS}")
        labels = region_channels(x.channel_names, region, overrides)
    else:
        labels = list(region)
        unmatched = [lab for lab in labels if lab not in x.channel_names]
        if unmatched:
            raise MappingError(f"channels not in montage: {unmatched}")
    idx = [x.channel_names.index(lab) for lab in labels]
    out = x.epochs.copy()
    out[:, idx, :] = 0
    return x.with_epochs(out)
