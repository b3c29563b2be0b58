"""Concept templates and similarity-based zero-shot classification."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .data_io import FeatureBank
from .numerics import DimensionError


class CoverageError(ValueError):
    pass


class LeakageError(ValueError):
    pass


@dataclass
class TemplateBank:
    templates: np.ndarray
    concept_ids: list[str]
    images_per_concept: list[int] | None = None

    def __post_init__(self):
        if len(set(self.concept_ids)) != len(self.concept_ids):
            raise ValueError("concept_ids must be unique")
        if self.templates.shape[0] != len(self.concept_ids):
            raise ValueError("one template row per concept required")

    def index_of(self, concept_id) -> int:
        return self.concept_ids.index(concept_id)


def build_templates(bank: FeatureBank, concepts=None, stimulus_ids=None) -> TemplateBank:
    """Average the unit-normalised features of each concept's images, then renormalise.

    ``concepts`` defaults to every concept in the bank, in first-seen order.
    Passing ``stimulus_ids`` asserts that no template image was shown as a
    stimulus.
    """
    if stimulus_ids is not None:
        leaked = sorted(set(bank.image_ids) & set(stimulus_ids))
        if leaked:
            raise LeakageError(f"{len(leaked)} template images were EEG stimuli, e.g. {leaked[0]!r}")
    if concepts is None:
        concepts = list(dict.fromkeys(bank.concept_ids))
    feats = bank.features.astype(np.float64)
    feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
    rows_by_concept: dict[str, list[int]] = {}
    for r, c in enumerate(bank.concept_ids):
        rows_by_concept.setdefault(c, []).append(r)
    out, counts = [], []
    for c in concepts:
        rows = rows_by_concept.get(c)
        if not rows:
            raise CoverageError(f"concept {c!r} has no template images")
        m = feats[rows].mean(axis=0)
        out.append(m / np.linalg.norm(m))
        counts.append(len(rows))
    return TemplateBank(np.stack(out), list(concepts), counts)


@dataclass
class SimilarityReport:
    similarity: np.ndarray          # (n_trials, n_concepts)
    ranking: np.ndarray             # (n_trials, n_concepts) concept indices
    topk_hits: dict[int, np.ndarray]
    concept_ids: list[str]
    true_index: np.ndarray

    def to_json(self, path, top=10, trial_ids=None):
        trials = []
        for i in range(len(self.ranking)):
            rank = self.ranking[i, :top]
            trials.append({
                "trial": trial_ids[i] if trial_ids is not None else i,
                "true": self.concept_ids[self.true_index[i]],
                "ranking": [self.concept_ids[j] for j in rank],
                "scores": [float(self.similarity[i, j]) for j in rank],
            })
        acc = {str(k): topk_accuracy(self, k) for k in sorted(self.topk_hits)}
        with open(path, "w") as fh:
            json.dump({"accuracy": acc, "trials": trials}, fh, indent=1)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "accuracy", "n_trials"])
            for k in sorted(self.topk_hits):
                w.writerow([k, f"{topk_accuracy(self, k):.6f}", len(self.true_index)])


def classify(eeg_features, tb: TemplateBank, true_concepts, ks=(1, 5)) -> SimilarityReport:
    """Rank templates by cosine similarity for every trial.

    Ties are broken toward the lower concept index, so the ranking is a pure
    function of the inputs.
    """
    F = np.asarray(eeg_features, dtype=np.float64)
    if F.ndim != 2 or F.shape[1] != tb.templates.shape[1]:
        raise DimensionError(f"features {F.shape} vs templates {tb.templates.shape}")
    n_concepts = len(tb.concept_ids)
    for k in ks:
        if not 1 <= k <= n_concepts:
            raise ValueError(f"k={k} outside 1..{n_concepts}")
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    F = F / np.where(norms == 0, 1.0, norms)
    sim = np.clip(F @ tb.templates.T, -1.0, 1.0)
    ranking = np.argsort(-sim, axis=1, kind="stable")
    lookup = {c: i for i, c in enumerate(tb.concept_ids)}
    try:
        truth = np.array([lookup[c] for c in true_concepts])
    except KeyError as exc:
        raise CoverageError(f"trial concept {exc} has no template") from exc
    position = np.argmax(ranking == truth[:, None], axis=1)
    hits = {int(k): position < k for k in ks}
    return SimilarityReport(sim, ranking, hits, list(tb.concept_ids), truth)


def topk_accuracy(report: SimilarityReport, k: int) -> float:
    if k not in report.topk_hits:
        raise ValueError(f"top-{k} was not evaluated; available {sorted(report.topk_hits)}")
    return float(np.mean(report.topk_hits[k]))
