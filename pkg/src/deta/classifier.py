"""Weighted nearest-centroid inference on adapted features.

Centroids are image-weight-scaled class means of the adapted support
features (the projection head is discarded at inference). Queries go to the
centroid with the highest cosine similarity; exact ties break toward the
lowest class id.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .adaptation import AdaptedState, forward_features
from .episodes import TaskEpisode
from .errors import DegenerateVectorError, EmptyClassError, InvalidParameterError

_METRICS = ("cosine", "euclidean")


@dataclass
class PrototypeSet:
    """Per-class centroids plus the image weights they were built from."""

    centroids: dict[int, np.ndarray]
    weight_source: dict[int, float]
    metric: str = "cosine"


def build_classifier(
    features: Mapping[int, np.ndarray],
    labels: Mapping[int, int],
    omega: Mapping[int, float],
    way: int | None = None,
    metric: str = "cosine",
) -> PrototypeSet:
    """Build weighted class centroids: sum of omega-scaled members over member count."""
    if metric not in _METRICS:
        raise InvalidParameterError(f"unknown metric {metric!r}")
    if not features:
        raise EmptyClassError("no support features")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for sid in sorted(features):
        c = labels[sid]
        vec = float(omega[sid]) * np.asarray(features[sid], dtype=np.float64)
        sums[c] = sums[c] + vec if c in sums else vec
        counts[c] = counts.get(c, 0) + 1
    if way is not None:
        empty = [c for c in range(way) if c not in counts]
        if empty:
            raise EmptyClassError(f"classes without support features: {empty}")
    centroids = {c: sums[c] / counts[c] for c in sorted(sums)}
    return PrototypeSet(centroids=centroids, weight_source=dict(omega), metric=metric)


def classify(query: np.ndarray, prototypes: PrototypeSet) -> tuple[int, np.ndarray]:
    """Predict the class of one query; returns (class, score per class).

    Scores follow ascending class id: cosine similarity, or negated Euclidean
    distance for the euclidean metric. argmax with first-wins tie-breaking.
    """
    q = np.asarray(query, dtype=np.float64)
    classes = sorted(prototypes.centroids)
    if not classes:
        raise EmptyClassError("no centroids")
    if prototypes.metric == "cosine":
        qn = float(np.linalg.norm(q))
        if qn == 0.0:
            raise DegenerateVectorError("zero-norm query")
        scores = []
        for c in classes:
            mu = prototypes.centroids[c]
            mn = float(np.linalg.norm(mu))
            if mn == 0.0:
                raise DegenerateVectorError(f"zero-norm centroid for class {c}")
            scores.append(float(np.dot(q, mu) / (qn * mn)))
        scores = np.array(scores)
    else:
        scores = -np.array(
            [float(np.linalg.norm(q - prototypes.centroids[c])) for c in classes]
        )
    return classes[int(np.argmax(scores))], scores


def evaluate(episode: TaskEpisode, state: AdaptedState, metric: str = "cosine") -> float:
    """Accuracy of the adapted model's weighted nearest-centroid over the queries."""
    if not episode.queries:
        raise InvalidParameterError("episode has no query samples")
    feats = {
        s.sample_id: forward_features(state.adapter, s.image_feature) for s in episode.support
    }
    protos = build_classifier(
        feats, episode.labels(), state.final_image_weights, way=episode.way, metric=metric
    )
    hits = 0
    for q in episode.queries:
        rep = forward_features(state.adapter, q.image_feature)
        pred, _ = classify(rep, protos)
        hits += int(pred == q.ground_truth_label)
    return hits / len(episode.queries)


def plain_ncc_accuracy(episode: TaskEpisode, metric: str = "cosine") -> float:
    """Unweighted nearest-centroid accuracy on the raw features (no adaptation)."""
    if not episode.queries:
        raise InvalidParameterError("episode has no query samples")
    feats = {s.sample_id: np.asarray(s.image_feature, dtype=np.float64) for s in episode.support}
    ones = {s.sample_id: 1.0 for s in episode.support}
    protos = build_classifier(feats, episode.labels(), ones, way=episode.way, metric=metric)
    hits = 0
    for q in episode.queries:
        pred, _ = classify(q.image_feature, protos)
        hits += int(pred == q.ground_truth_label)
    return hits / len(episode.queries)
