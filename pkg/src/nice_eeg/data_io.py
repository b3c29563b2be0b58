"""EEG epoch sets, image feature banks, their binary file formats, and the
synthetic planted-signal generator used as an end-to-end oracle."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    pass


class CorruptionError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass
class EEGEpochSet:
    """Trials x electrodes x samples, with per-trial stimulus metadata.

    ``tmin`` is the time of the first sample relative to stimulus onset, in
    seconds; negative values mean the epochs still carry a pre-stimulus part.
    """
    epochs: np.ndarray
    sample_rate: float
    channel_names: list[str]
    stimulus_ids: list[str]
    concept_ids: list[str]
    repetition_index: np.ndarray
    tmin: float = 0.0

    def __post_init__(self):
        self.repetition_index = np.asarray(self.repetition_index, dtype=np.int64)
        self.stimulus_ids = list(self.stimulus_ids)
        self.concept_ids = list(self.concept_ids)
        self.channel_names = list(self.channel_names)
        self.validate()

    def validate(self):
        if self.epochs.ndim != 3:
            raise IntegrityError(f"epochs must be 3-D, got {self.epochs.shape}")
        n, C, _ = self.epochs.shape
        if not (n == len(self.stimulus_ids) == len(self.concept_ids) == len(self.repetition_index)):
            raise IntegrityError("per-trial metadata lengths do not match the trial count")
        if C != len(self.channel_names):
            raise IntegrityError(f"{C} electrodes but {len(self.channel_names)} channel names")
        if not self.sample_rate > 0:
            raise IntegrityError("sample_rate must be positive")
        keys = set(zip(self.stimulus_ids, self.repetition_index.tolist()))
        if len(keys) != n:
            raise IntegrityError("duplicate (stimulus_id, repetition_index) pair")

    @property
    def n_trials(self):
        return self.epochs.shape[0]

    @property
    def n_samples(self):
        return self.epochs.shape[2]

    @property
    def times(self):
        return self.tmin + np.arange(self.n_samples) / self.sample_rate

    def with_epochs(self, epochs, **changes) -> "EEGEpochSet":
        return replace(self, epochs=epochs, **changes)

    def subset(self, idx) -> "EEGEpochSet":
        idx = np.asarray(idx)
        return replace(self, epochs=self.epochs[idx],
                       stimulus_ids=[self.stimulus_ids[i] for i in idx],
                       concept_ids=[self.concept_ids[i] for i in idx],
                       repetition_index=self.repetition_index[idx])


@dataclass
class FeatureBank:
    features: np.ndarray
    image_ids: list[str]
    concept_ids: list[str]
    encoder_tag: str = ""
    _index: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.image_ids = list(self.image_ids)
        self.concept_ids = list(self.concept_ids)
        if self.features.ndim != 2 or self.features.shape[1] < 1:
            raise IntegrityError(f"features must be (n, D>=1), got {self.features.shape}")
        if self.features.shape[0] != len(self.image_ids) or len(self.image_ids) != len(self.concept_ids):
            raise IntegrityError("feature rows, image_ids and concept_ids differ in length")
        zero = np.flatnonzero(~np.any(self.features != 0, axis=1))
        if zero.size:
            raise IntegrityError(f"zero-norm feature row for image {self.image_ids[zero[0]]!r}")
        self._index = {}
        for row, iid in enumerate(self.image_ids):
            if iid in self._index:
                raise IntegrityError(f"duplicate image_id {iid!r}")
            self._index[iid] = row

    @property
    def dim(self):
        return self.features.shape[1]

    def row_of(self, image_id) -> int:
        return self._index[image_id]

    def get(self, image_id) -> np.ndarray:
        return self.features[self._index[image_id]]

    def subset(self, rows) -> "FeatureBank":
        rows = list(rows)
        return FeatureBank(self.features[rows], [self.image_ids[r] for r in rows],
                           [self.concept_ids[r] for r in rows], self.encoder_tag)


@dataclass
class PairedDataset:
    eeg: EEGEpochSet
    bank: FeatureBank
    pairs: np.ndarray  # (n, 2): trial index, feature row

    def __len__(self):
        return len(self.pairs)

    def arrays(self, dtype=np.float32):
        x = self.eeg.epochs[self.pairs[:, 0]][:, None].astype(dtype, copy=False)
        f = self.bank.features[self.pairs[:, 1]].astype(dtype, copy=False)
        return x, f

    def select(self, which) -> "PairedDataset":
        return PairedDataset(self.eeg, self.bank, self.pairs[np.asarray(which)])


def pair(eeg: EEGEpochSet, bank: FeatureBank) -> PairedDataset:
    """Pair every trial with the feature row of its own stimulus image."""
    missing = [s for s in eeg.stimulus_ids if s not in bank._index]
    if missing:
        raise IntegrityError(f"{len(missing)} stimuli lack features, e.g. {missing[0]!r}")
    rows = [bank.row_of(s) for s in eeg.stimulus_ids]
    return PairedDataset(eeg, bank, np.column_stack([np.arange(eeg.n_trials), rows]))


def split_train_val(ds: PairedDataset, n_val: int = 740, seed: int = 0):
    n = len(ds)
    if not 0 <= n_val < n:
        raise ValueError(f"n_val={n_val} must be smaller than the {n} available trials")
    perm = np.random.default_rng(seed).permutation(n)
    val = np.sort(perm[:n_val])
    tr = np.sort(perm[n_val:])
    return ds.select(tr), ds.select(val)


# -- binary formats ---------------------------------------------------------

EEGT_MAGIC = b"EEGT"
FEAT_MAGIC = b"FEAT"
FORMAT_VERSION = 1


def _write_blob(fh, magic, dims, payload, meta):
    fh.write(magic)
    fh.write(struct.pack("<I", FORMAT_VERSION))
    fh.write(struct.pack(f"<{len(dims)}Q", *dims))
    fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())
    blob = json.dumps(meta).encode("utf-8")
    fh.write(struct.pack("<Q", len(blob)))
    fh.write(blob)


def _read_blob(path, magic, ndims):
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    head = 8 + 8 * ndims
    if len(data) < head:
        raise CorruptionError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{ndims}Q", data, 8)
    count = 1
    for d in dims:
        count *= d
        if count > len(data):
            raise CorruptionError(f"{path}: declared dims {dims} exceed file size")
    end = head + 4 * count
    if end + 8 > len(data):
        raise CorruptionError(f"{path}: payload shorter than declared dims {dims}")
    payload = np.frombuffer(data, "<f4", count=count, offset=head).reshape(dims).copy()
    (mlen,) = struct.unpack_from("<Q", data, end)
    if end + 8 + mlen != len(data):
        raise CorruptionError(f"{path}: metadata length mismatch")
    try:
        meta = json.loads(data[end + 8:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable metadata") from exc
    return payload, meta


def save_epochs(eeg: EEGEpochSet, path) -> None:
    meta = {
        "sample_rate": eeg.sample_rate,
        "channel_names": eeg.channel_names,
        "stimulus_ids": eeg.stimulus_ids,
        "concept_ids": eeg.concept_ids,
        "repetition_index": eeg.repetition_index.tolist(),
        "tmin": eeg.tmin,
    }
    with open(path, "wb") as fh:
        _write_blob(fh, EEGT_MAGIC, eeg.epochs.shape, eeg.epochs, meta)


def load_epochs(path) -> EEGEpochSet:
    epochs, meta = _read_blob(path, EEGT_MAGIC, 3)
    try:
        return EEGEpochSet(epochs, float(meta["sample_rate"]), meta["channel_names"],
                           meta["stimulus_ids"], meta["concept_ids"],
                           np.asarray(meta["repetition_index"]), float(meta.get("tmin", 0.0)))
    except KeyError as exc:
        raise CorruptionError(f"{path}: metadata lacks {exc}") from exc


def save_feature_bank(bank: FeatureBank, path) -> None:
    meta = {"image_ids": bank.image_ids, "concept_ids": bank.concept_ids,
            "encoder_tag": bank.encoder_tag}
    with open(path, "wb") as fh:
        _write_blob(fh, FEAT_MAGIC, bank.features.shape, bank.features, meta)


def load_feature_bank(path) -> FeatureBank:
    feats, meta = _read_blob(path, FEAT_MAGIC, 2)
    try:
        return FeatureBank(feats, meta["image_ids"], meta["concept_ids"],
                           meta.get("encoder_tag", ""))
    except KeyError as exc:
        raise CorruptionError(f"{path}: metadata lacks {exc}") from exc


# -- synthetic oracle -------------------------------------------------------

@dataclass
class SynthSpec:
    """Planted-signal dataset description.

    Concepts are random unit vectors; images perturb them by
    ``image_jitter``. A trial is ``A @ f`` reshaped over (signal electrodes,
    signal window) plus white noise whose std is ``noise_std`` times the RMS
    of the clean signal inside the window.

    ``carrier_hz`` switches to a narrowband signal: ``A @ f`` then gives a
    sine and a cosine amplitude per signal electrode at that frequency.
    ``n_categories > 0`` clusters concepts around category centroids.
    """
    n_concepts: int = 200
    images_per_concept: int = 10
    repetitions: int = 4
    C: int = 32
    T: int = 250
    D: int = 64
    mixing_seed: int = 0
    noise_std: float = 1.0
    signal_window: tuple[int, int] = (25, 150)
    sample_rate: float = 250.0
    signal_electrodes: tuple[int, ...] | None = None
    carrier_hz: float | None = None
    image_jitter: float = 0.1
    seed: int = 1
    concept_prefix: str = "c"
    template_images: int = 0
    n_categories: int = 0
    category_spread: float = 0.5

    def __post_init__(self):
        for name in ("n_concepts", "images_per_concept", "repetitions", "C", "T", "D"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        start, end = self.signal_window
        if not 0 <= start < end <= self.T:
            raise ValueError(f"signal_window {self.signal_window} not within [0, {self.T}]")
        if self.signal_electrodes is not None:
            el = tuple(self.signal_electrodes)
            if not el or min(el) < 0 or max(el) >= self.C:
                raise ValueError("signal_electrodes out of range")
        self.signal_window = (int(start), int(end))

    @property
    def electrodes(self):
        if self.signal_electrodes is None:
            return np.arange(self.C)
        return np.asarray(self.signal_electrodes)

    def mixing_rows(self):
        n_el = len(self.electrodes)
        if self.carrier_hz is not None:
            return 2 * n_el
        return n_el * (self.signal_window[1] - self.signal_window[0])


@dataclass
class GroundTruth:
    mixing: np.ndarray            # (rows, D)
    concepts: FeatureBank         # one row per concept, id = concept id
    signal_rms: float
    categories: dict[str, int] = field(default_factory=dict)


def mixing_matrix(spec: SynthSpec) -> np.ndarray:
    rng = np.random.default_rng(spec.mixing_seed)
    return rng.standard_normal((spec.mixing_rows(), spec.D)) / np.sqrt(spec.D)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def clean_signal(spec: SynthSpec, A: np.ndarray, features: np.ndarray) -> np.ndarray:
    """Noise-free trials (n, C, T) for the given image feature rows."""
    n = features.shape[0]
    start, end = spec.signal_window
    out = np.zeros((n, spec.C, spec.T))
    el = spec.electrodes
    proj = features @ A.T
    if spec.carrier_hz is None:
        out[:, el, start:end] = proj.reshape(n, len(el), end - start)
    else:
        t = np.arange(start, end) / spec.sample_rate
        phase = 2 * np.pi * spec.carrier_hz * t
        amp = proj.reshape(n, 2, len(el))
        out[:, el, start:end] = (amp[:, 0, :, None] * np.sin(phase)
                                 + amp[:, 1, :, None] * np.cos(phase))
    return out


def synth_generate(spec: SynthSpec):
    """Build ``(EEGEpochSet, FeatureBank, GroundTruth)`` from a :class:`SynthSpec`.

    The mixing matrix depends only on ``mixing_seed`` and the layout, so a
    train and a held-out set made with the same mixing seed share it. The
    feature bank holds the stimulus images followed by ``template_images``
    extra images per concept that never appear as stimuli.
    """
    rng = np.random.default_rng(spec.seed)
    A = mixing_matrix(spec)
    cids = [f"{spec.concept_prefix}{i:04d}" for i in range(spec.n_concepts)]
    categories = {}
    if spec.n_categories > 0:
        centroids = _unit(rng.standard_normal((spec.n_categories, spec.D)))
        cat = np.arange(spec.n_concepts) % spec.n_categories
        concepts = _unit(centroids[cat] + spec.category_spread
                         * rng.standard_normal((spec.n_concepts, spec.D)) / np.sqrt(spec.D))
        categories = dict(zip(cids, cat.tolist()))
    else:
        concepts = _unit(rng.standard_normal((spec.n_concepts, spec.D)))

    per_concept = spec.images_per_concept + spec.template_images
    jitter = rng.standard_normal((spec.n_concepts, per_concept, spec.D)) / np.sqrt(spec.D)
    images = _unit(concepts[:, None, :] + spec.image_jitter * jitter)

    stim_feats = images[:, :spec.images_per_concept].reshape(-1, spec.D)
    stim_ids = [f"{c}_img{j:02d}" for c in cids for j in range(spec.images_per_concept)]
    stim_cids = [c for c in cids for _ in range(spec.images_per_concept)]
    tmpl_feats = images[:, spec.images_per_concept:].reshape(-1, spec.D)
    tmpl_ids = [f"{c}_tpl{j:02d}" for c in cids for j in range(spec.template_images)]
    tmpl_cids = [c for c in cids for _ in range(spec.template_images)]

    clean = clean_signal(spec, A, stim_feats)
    start, end = spec.signal_window
    rms = float(np.sqrt(np.mean(clean[:, spec.electrodes, start:end] ** 2)))
    sigma = spec.noise_std * rms
    n_img = len(stim_ids)
    reps = spec.repetitions
    epochs = np.empty((n_img * reps, spec.C, spec.T), dtype=np.float32)
    for r in range(reps):
        block = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean
        epochs[r::reps] = block
    eeg = EEGEpochSet(
        epochs, spec.sample_rate, [f"E{i:02d}" for i in range(spec.C)],
        [s for s in stim_ids for _ in range(reps)],
        [c for c in stim_cids for _ in range(reps)],
        np.tile(np.arange(reps), n_img))
    bank = FeatureBank(np.vstack([stim_feats, tmpl_feats]).astype(np.float32),
                       stim_ids + tmpl_ids, stim_cids + tmpl_cids, "synthetic")
    truth = GroundTruth(A, FeatureBank(concepts.astype(np.float32), cids, cids, "synthetic-concepts"),
                        rms, categories)
    return eeg, bank, truth


def save_ground_truth(truth: GroundTruth, prefix) -> None:
    """Concept features as ``<prefix>.feat`` and the mixing matrix as raw f32
    ``<prefix>_mixing.f32`` preceded by two u64 dims."""
    prefix = Path(prefix)
    save_feature_bank(truth.concepts, prefix.with_suffix(".feat"))
    with open(prefix.parent / f"{prefix.name}_mixing.f32", "wb") as fh:
        fh.write(struct.pack("<2Q", *truth.mixing.shape))
        fh.write(np.ascontiguousarray(truth.mixing, dtype="<f4").tobytes())
