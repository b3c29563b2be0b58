"""Ablation sweeps, representational similarity, time-frequency maps and
gradient-weighted electrode maps for trained encoders.

A sweep point evaluates the trained encoder on a transformed copy of the test
set (or retrains on a transformed training set). Every sweep starts with a
``full`` baseline point that runs the untouched pipeline.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.signal import fftconvolve

from . import preprocess as pp
from .contrastive import TrainConfig, train
from .data_io import EEGEpochSet, FeatureBank, PairedDataset, pair, split_train_val
from .encoders import EncoderParams, HyperParams, encode, tsconv_backward, tsconv_forward
from .zeroshot import TemplateBank, classify, topk_accuracy

log = logging.getLogger(__name__)

CATEGORY_ORDER = ("animal", "food", "vehicle", "tool", "others")
DEFAULT_TEST_REPS = tuple(range(5, 81, 5))
DEFAULT_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class UnsupportedModelError(ValueError):
    pass


@dataclass
class EvalSet:
    """Test trials (possibly with repetitions) and the templates to match them against."""
    eeg: EEGEpochSet
    templates: TemplateBank


@dataclass
class SweepResult:
    axis: str
    values: list
    top1: list[float]
    top5: list[float]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not len(self.values) == len(self.top1) == len(self.top5):
            raise ValueError("sweep axis and metric lengths differ")

    def point(self, value):
        i = self.values.index(value)
        return self.top1[i], self.top5[i]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([self.axis, "top1", "top5"])
            for v, a, b in zip(self.values, self.top1, self.top5):
                w.writerow([v, f"{a:.6f}", f"{b:.6f}"])

    def to_dict(self):
        return {"axis": self.axis, "values": self.values, "top1": self.top1,
                "top5": self.top5, "meta": self.meta}


def evaluate(params: EncoderParams, test: EvalSet, ks=(1, 5), n_reps=None,
             feature_average=False):
    """Zero-shot report for a test set.

    Repetitions of a stimulus are averaged in signal space before encoding;
    with ``feature_average`` each repetition is encoded and the normalised
    features are averaged instead.
    """
    eeg = test.eeg
    ks = tuple(k for k in ks if k <= len(test.templates.concept_ids))
    if feature_average:
        if n_reps is not None:
            keep = eeg.repetition_index < n_reps
            eeg = eeg.subset(np.flatnonzero(keep))
        feats = encode(eeg.epochs[:, None], params)
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        stim = list(dict.fromkeys(eeg.stimulus_ids))
        rows = {s: [] for s in stim}
        for i, s in enumerate(eeg.stimulus_ids):
            rows[s].append(i)
        feats = np.stack([feats[rows[s]].mean(axis=0) for s in stim])
        concepts = [eeg.concept_ids[rows[s][0]] for s in stim]
        return classify(feats, test.templates, concepts, ks)
    if n_reps is not None or len(set(eeg.stimulus_ids)) < eeg.n_trials:
        eeg = pp.average_repetitions(eeg, n_reps)
    feats = encode(eeg.epochs[:, None], params)
    return classify(feats, test.templates, eeg.concept_ids, ks)


def _scores(report):
    top5 = topk_accuracy(report, 5) if 5 in report.topk_hits else math.nan
    return topk_accuracy(report, 1), top5


def _run_grid(axis, labels, run_point, out_dir=None, meta=None, n_jobs=1, run_key=None):
    """Evaluate ``run_point(label) -> (top1, top5)`` per label.

    With ``out_dir`` each finished point is written to its own JSON record and
    reused on the next call, so interrupted sweeps resume where they stopped.
    A record is only reused when its ``run_key`` (e.g. a checkpoint digest)
    matches.
    """
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    def one(i_label):
        i, label = i_label
        rec = out / f"{axis}_{i:03d}.json" if out else None
        if rec and rec.exists():
            data = json.loads(rec.read_text())
            if data.get("value") == label and data.get("key") == run_key:
                return data["top1"], data["top5"]
        top1, top5 = run_point(label)
        if rec:
            rec.write_text(json.dumps({"value": label, "key": run_key,
                                       "top1": top1, "top5": top5}))
        log.info("%s=%s top1=%.4f top5=%.4f", axis, label, top1, top5)
        return top1, top5

    items = list(enumerate(labels))
    if n_jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(n_jobs) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    return SweepResult(axis, list(labels), [r[0] for r in results],
                       [r[1] for r in results], dict(meta or {}))


# -- time ------------------------------------------------------------------

def time_windows(duration_ms, mode, step_ms=100.0, width_ms=100.0):
    """Sweep windows in ms; ``forward`` grows [0, x), ``backward`` shrinks
    [x, end), ``segment`` slides a fixed-width window."""
    n = int(round(duration_ms / step_ms))
    if mode == "forward":
        return [(0.0, min(step_ms * i, duration_ms)) for i in range(1, n + 1)]
    if mode == "backward":
        return [(step_ms * i, duration_ms) for i in range(n)]
    if mode == "segment":
        starts = np.arange(0.0, duration_ms - width_ms + 1e-9, step_ms)
        return [(float(s), float(s + width_ms)) for s in starts]
    raise ValueError(f"unknown time sweep mode {mode!r}")


def _label(window):
    return f"{window[0]:g}-{window[1]:g}"


def sweep_time(params, test: EvalSet, mode="segment", step_ms=100.0, width_ms=100.0,
               out_dir=None, n_jobs=1, factory=None, train_ds=None, run_key=None):
    """Accuracy with samples outside each window set to zero.

    The trained model is reused on masked test data. Passing ``factory`` and
    ``train_ds`` retrains per window on identically masked training data.
    """
    eeg = test.eeg
    if len(set(eeg.stimulus_ids)) < eeg.n_trials:
        eeg = pp.average_repetitions(eeg)
    duration = eeg.n_samples / eeg.sample_rate * 1000.0
    windows = time_windows(duration, mode, step_ms, width_ms)
    labels = ["full"] + [_label(w) for w in windows]
    lookup = dict(zip(labels[1:], windows))

    def run(label):
        masked = eeg if label == "full" else pp.mask_time_window(eeg, lookup[label])
        model = params
        if factory is not None and label != "full":
            tr = train_ds.eeg
            model = factory(PairedDataset(pp.mask_time_window(tr, lookup[label]),
                                          train_ds.bank, train_ds.pairs))
        return _scores(evaluate(model, EvalSet(masked, test.templates)))

    meta = {"mode": mode, "step_ms": step_ms, "width_ms": width_ms,
            "retrained": factory is not None}
    return _run_grid("window_ms", labels, run, out_dir, meta, n_jobs, run_key)


# -- space -----------------------------------------------------------------

def sweep_regions(params, test: EvalSet, regions=pp.REGIONS, overrides=None,
                  out_dir=None, n_jobs=1, run_key=None):
    """Accuracy with each scalp region's electrodes zeroed; ``none`` is the baseline.

    Entries of ``regions`` may be region names or explicit lists of channel
    labels; ``"all"`` zeroes every channel.
    """
    eeg = test.eeg
    if len(set(eeg.stimulus_ids)) < eeg.n_trials:
        eeg = pp.average_repetitions(eeg)
    labels = ["none"] + [r if isinstance(r, str) else "+".join(r) for r in regions]
    spec = dict(zip(labels[1:], regions))

    def run(label):
        if label == "none":
            ablated = eeg
        elif label == "all":
            ablated = pp.ablate_electrodes(eeg, eeg.channel_names)
        else:
            ablated = pp.ablate_electrodes(eeg, spec[label], overrides)
        return _scores(evaluate(params, EvalSet(ablated, test.templates)))

    meta = {"channels": {lab: pp.region_channels(eeg.channel_names, spec[lab], overrides)
                         for lab in labels[1:] if isinstance(spec[lab], str) and lab != "all"}}
    return _run_grid("ablated", labels, run, out_dir, meta, n_jobs, run_key)


# -- retraining sweeps -----------------------------------------------------

def make_factory(hyper: HyperParams, cfg: TrainConfig, n_val: int | None = None):
    """A ``PairedDataset -> EncoderParams`` trainer with a held-out split."""
    def factory(ds: PairedDataset) -> EncoderParams:
        nv = cfg.n_val if n_val is None else n_val
        nv = min(nv, max(len(ds) // 10, 2))
        tr, va = split_train_val(ds, nv, cfg.seed)
        best, _ = train(tr, va, hyper, cfg)
        return best
    return factory


def sweep_bands(factory: Callable[[PairedDataset], EncoderParams], train_ds: PairedDataset,
                test: EvalSet, bands: Sequence[pp.BandSpec] | None = None,
                out_dir=None, n_jobs=1, run_key=None):
    """Retrain and test on band-limited data, one point per band.

    Both the training and the test trials are filtered, so no out-of-band
    information reaches any point. ``full`` trains on the unfiltered data.
    """
    bands = list(bands or pp.BANDS.values())
    lookup = {b.name: b for b in bands}
    labels = ["full"] + [b.name for b in bands]
    test_eeg = test.eeg
    if len(set(test_eeg.stimulus_ids)) < test_eeg.n_trials:
        test_eeg = pp.average_repetitions(test_eeg)

    def run(label):
        if label == "full":
            tr, te = train_ds, test_eeg
        else:
            band = lookup[label]
            tr = PairedDataset(pp.bandpass(train_ds.eeg, band), train_ds.bank, train_ds.pairs)
            te = pp.bandpass(test_eeg, band)
        return _scores(evaluate(factory(tr), EvalSet(te, test.templates)))

    meta = {"retrained_per_band": True,
            "bands": {b.name: [b.lo, b.hi] for b in bands}}
    return _run_grid("band", labels, run, out_dir, meta, n_jobs, run_key)


def subsample_training(eeg: EEGEpochSet, fraction: float, axis: str, seed: int = 0) -> EEGEpochSet:
    """Keep a seeded fraction of stimuli (``conditions``) or of repetition indices."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    if axis == "conditions":
        stim = list(dict.fromkeys(eeg.stimulus_ids))
        n_keep = max(1, int(round(fraction * len(stim))))
        keep = set(rng.permutation(len(stim))[:n_keep].tolist())
        chosen = {stim[i] for i in keep}
        idx = [i for i, s in enumerate(eeg.stimulus_ids) if s in chosen]
    elif axis == "repetitions":
        reps = np.unique(eeg.repetition_index)
        n_keep = max(1, int(round(fraction * len(reps))))
        chosen = set(rng.permutation(reps)[:n_keep].tolist())
        idx = [i for i, r in enumerate(eeg.repetition_index) if r in chosen]
    else:
        raise ValueError(f"axis must be 'conditions' or 'repetitions', got {axis!r}")
    return eeg.subset(idx)


def sweep_training_size(factory, train_eeg: EEGEpochSet, bank: FeatureBank, test: EvalSet,
                        fractions=DEFAULT_FRACTIONS, axis="conditions", seed=0,
                        out_dir=None, n_jobs=1, run_key=None):
    """Retrain on growing fractions of conditions or repetitions.

    ``train_eeg`` keeps its individual repetitions; each point subsamples,
    averages the remaining repetitions per stimulus and trains from scratch.
    """
    labels = [float(f) for f in fractions]

    def run(frac):
        sub = subsample_training(train_eeg, frac, axis, seed) if frac < 1 else train_eeg
        ds = pair(pp.average_repetitions(sub), bank)
        return _scores(evaluate(factory(ds), test))

    return _run_grid(f"{axis}_fraction", labels, run, out_dir, {"axis": axis, "seed": seed}, n_jobs, run_key)


def sweep_test_repetitions(params, test: EvalSet, reps=DEFAULT_TEST_REPS, out_dir=None, n_jobs=1,
                           run_key=None):
    """Accuracy when only the first ``n`` repetitions of each test stimulus are averaged."""
    labels = [int(r) for r in reps]
    return _run_grid("test_repetitions", labels,
                     lambda n: _scores(evaluate(params, test, n_reps=n)), out_dir, {}, n_jobs, run_key)


# -- representational similarity -------------------------------------------

@dataclass
class RDM:
    matrix: np.ndarray
    concept_ids: list[str]
    categories: list[str]

    def block_means(self):
        """Mean similarity inside category blocks and between them."""
        cats = np.asarray(self.categories)
        same = cats[:, None] == cats[None, :]
        return float(self.matrix[same].mean()), float(self.matrix[~same].mean())

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["concept", "category"] + self.concept_ids)
            for cid, cat, row in zip(self.concept_ids, self.categories, self.matrix):
                w.writerow([cid, cat] + [f"{v:.6f}" for v in row])


def rdm(params, test: EvalSet, category_map: dict, category_order=None) -> RDM:
    """Cosine similarity between each concept's EEG feature and every image template.

    Concepts are grouped into category blocks following ``category_order``
    (default: animal, food, vehicle, tool, others; unknown labels follow in
    first-seen order) and keep their template order within a block.
    """
    concepts = test.templates.concept_ids
    unmapped = [c for c in concepts if c not in category_map]
    if unmapped:
        raise pp.MappingError(f"{len(unmapped)} concepts lack a category, e.g. {unmapped[0]!r}")
    eeg = test.eeg
    if len(set(eeg.stimulus_ids)) < eeg.n_trials:
        eeg = pp.average_repetitions(eeg)
    feats = encode(eeg.epochs[:, None], params).astype(np.float64)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    by_concept = {}
    for i, c in enumerate(eeg.concept_ids):
        by_concept.setdefault(c, []).append(i)
    missing = [c for c in concepts if c not in by_concept]
    if missing:
        raise pp.MappingError(f"no EEG trials for concept {missing[0]!r}")
    E = np.stack([feats[by_concept[c]].mean(axis=0) for c in concepts])
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    return rdm_from_features(E, test.templates, category_map, category_order)


def rdm_from_features(eeg_features, templates: TemplateBank, category_map, category_order=None) -> RDM:
    order = list(category_order or CATEGORY_ORDER)
    for c in templates.concept_ids:
        cat = category_map[c]
        if cat not in order:
            order.append(cat)
    rank = {cat: i for i, cat in enumerate(order)}
    idx = sorted(range(len(templates.concept_ids)),
                 key=lambda i: (rank[category_map[templates.concept_ids[i]]], i))
    E = np.asarray(eeg_features, dtype=np.float64)
    E = E / np.linalg.norm(E, axis=1, keepdims=True)
    M = np.clip(E[idx] @ templates.templates[idx].T, -1.0, 1.0)
    ids = [templates.concept_ids[i] for i in idx]
    return RDM(M, ids, [category_map[c] for c in ids])


# -- time-frequency --------------------------------------------------------

@dataclass
class TFMap:
    power: np.ndarray      # (n_freqs, T)
    freqs: np.ndarray
    times: np.ndarray

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz"] + [f"{t:.4f}" for t in self.times])
            for f, row in zip(self.freqs, self.power):
                w.writerow([f"{f:g}"] + [f"{v:.6e}" for v in row])


def morlet(freq, sample_rate, n_cycles=7.0):
    """Complex Morlet wavelet spanning +-3.5 envelope standard deviations,
    scaled so a unit sine at ``freq`` yields magnitude 1/2."""
    sigma = n_cycles / (2 * np.pi * freq)
    t = np.arange(-3.5 * sigma, 3.5 * sigma + 0.5 / sample_rate, 1.0 / sample_rate)
    env = np.exp(-t ** 2 / (2 * sigma ** 2))
    return env * np.exp(2j * np.pi * freq * t) / env.sum()


def time_frequency(x: EEGEpochSet, channels, freqs=None, n_cycles=7.0, overrides=None) -> TFMap:
    """Morlet power averaged over the selected channels and all trials.

    ``channels`` is a region name or a list of channel labels.
    """
    if freqs is None:
        freqs = np.arange(2.0, 101.0, 2.0)
    freqs = np.asarray(freqs, dtype=float)
    nyq = x.sample_rate / 2
    if freqs.min() <= 0 or freqs.max() > nyq:
        raise ValueError(f"frequencies must lie in (0, {nyq}] Hz")
    if isinstance(channels, str):
        labels = pp.region_channels(x.channel_names, channels, overrides)
    else:
        labels = list(channels)
    if not labels:
        raise ValueError("empty channel selection")
    unknown = [c for c in labels if c not in x.channel_names]
    if unknown:
        raise pp.MappingError(f"channels not in montage: {unknown}")
    idx = [x.channel_names.index(c) for c in labels]
    data = x.epochs[:, idx, :].astype(np.float64).reshape(-1, x.n_samples)
    power = np.empty((len(freqs), x.n_samples))
    for i, f in enumerate(freqs):
        w = morlet(f, x.sample_rate, n_cycles)
        conv = fftconvolve(data, w[None, :], mode="same", axes=-1)
        power[i] = np.mean(np.abs(conv) ** 2, axis=0)
    return TFMap(power, freqs, x.times)


# -- Grad-CAM --------------------------------------------------------------

def grad_cam_spatial(params: EncoderParams, x, targets, batch_size=200):
    """Per-electrode importance of the spatial attention module's output.

    For each trial the score is the cosine similarity between its EEG feature
    and ``targets`` (its matched image feature). The gradient of that score at
    the module output is multiplied by the activation, rectified, averaged
    over time and trials, and scaled to a maximum of 1.
    """
    if params.hyper.spatial_module == "none":
        raise UnsupportedModelError("Grad-CAM needs an encoder with a SA or GA module")
    x = np.asarray(x)
    if x.ndim == 3:
        x = x[:, None]
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim == 1:
        targets = np.broadcast_to(targets, (len(x), targets.shape[0]))
    dtype = params.tensors["proj_w"].dtype
    total = np.zeros(params.hyper.C)
    for s in range(0, len(x), batch_size):
        xb = x[s:s + batch_size].astype(dtype, copy=False)
        feats, cache = tsconv_forward(xb, params, mode="eval")
        f = feats.astype(np.float64)
        norms = np.linalg.norm(f, axis=1, keepdims=True)
        norms = np.where(norms == 0, 1.0, norms)
        e = f / norms
        tgt = targets[s:s + batch_size]
        tgt = tgt / np.linalg.norm(tgt, axis=1, keepdims=True)
        # d cos(f, t) / d f
        dfeat = (tgt - e * np.sum(e * tgt, axis=1, keepdims=True)) / norms
        grads = tsconv_backward(dfeat.astype(dtype), cache, params.hyper, need_input_grad=True)
        act = cache.module_out[:, 0].astype(np.float64)
        cam = np.maximum(grads["module_out"][:, 0] * act, 0).mean(axis=2)
        total += cam.sum(axis=0)
    peak = total.max()
    return total / peak if peak > 0 else total


# -- outputs ---------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path, results: dict, seeds=None, checkpoint=None, extra=None):
    """JSON manifest listing each sweep's grid plus seeds and checkpoint hash."""
    doc = {
        "sweeps": {name: r.to_dict() for name, r in results.items()},
        "seeds": list(seeds or []),
        "checkpoint_sha256": file_digest(checkpoint) if checkpoint else None,
    }
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1))
