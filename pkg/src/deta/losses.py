"""Weighted contrastive objectives over unit embeddings, with analytic gradients.

Two losses share one embedding batch. The local compactness loss is a
weighted contrastive term over same-class region pairs whose denominator
ranges over all regions. The global dispersion loss is a weighted
cross-entropy of region-to-prototype posteriors, where prototypes are
image-weight-averaged image embeddings. Both return exact gradients with
respect to every embedding coordinate; weights are treated as constants.

All softmax-style reductions go through stable log-sum-exp, and cosine terms
are computed with the true input norms so the functions (and their
gradients) remain well-defined off the unit sphere, which is what the
finite-difference checks exercise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateVectorError,
    EmptyClassError,
    InvalidParameterError,
    MissingWeightError,
)
from .numerics import cosine_similarity, softmax
from .relevance import RegionIndex


@dataclass(frozen=True)
class LossHyperparams:
    """Temperatures for the two losses and their balance factor."""

    tau: float = 0.5
    pi: float = 0.07
    beta: float = 0.1

    def __post_init__(self):
        if self.tau <= 0.0 or self.pi <= 0.0:
            raise InvalidParameterError("temperatures must be positive")
        if self.beta < 0.0:
            raise InvalidParameterError("beta must be non-negative")


@dataclass
class EmbeddingBatch:
    """Unit image and region embeddings of one episode's support set."""

    image_embeddings: dict[int, np.ndarray]
    region_embeddings: dict[RegionIndex, np.ndarray]
    embed_dim: int = 128

    def validate(self, atol: float = 1e-9) -> None:
        for name, table in (("image", self.image_embeddings), ("region", self.region_embeddings)):
            for key, vec in table.items():
                if vec.shape != (self.embed_dim,):
                    raise InvalidParameterError(f"{name} embedding {key} has shape {vec.shape}")
                if abs(float(np.linalg.norm(vec)) - 1.0) > atol:
                    raise InvalidParameterError(f"{name} embedding {key} is not unit norm")


@dataclass
class LossValue:
    """Loss components with gradients keyed like the batch's embeddings."""

    l_local: float
    l_global: float
    combined: float
    region_grads: dict[RegionIndex, np.ndarray] = field(default_factory=dict)
    image_grads: dict[int, np.ndarray] = field(default_factory=dict)


def _region_matrix(batch: EmbeddingBatch) -> tuple[list[RegionIndex], np.ndarray]:
    keys = sorted(batch.region_embeddings)
    mat = np.stack([np.asarray(batch.region_embeddings[k], dtype=np.float64) for k in keys])
    return keys, mat


def _image_matrix(batch: EmbeddingBatch) -> tuple[list[int], np.ndarray]:
    ids = sorted(batch.image_embeddings)
    mat = np.stack([np.asarray(batch.image_embeddings[i], dtype=np.float64) for i in ids])
    return ids, mat


def _weight_vector(keys, weights: Mapping, what: str) -> np.ndarray:
    missing = [k for k in keys if k not in weights]
    if missing:
        raise MissingWeightError(f"{what} missing for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    return np.array([float(weights[k]) for k in keys])


def pairwise_local_term(
    regions: Mapping[RegionIndex, np.ndarray],
    weights: Mapping[RegionIndex, float],
    i: RegionIndex,
    j: RegionIndex,
    tau: float,
) -> float:
    """Contrastive term for one ordered same-class region pair.

    Negative log of the softmax mass that the weighted similarity of (i, j)
    receives among the weighted similarities of i to every other region.
    """
    if tau <= 0.0:
        raise InvalidParameterError("tau must be positive")
    if i == j:
        raise InvalidParameterError("pair must consist of two distinct regions")
    if i not in regions or j not in regions:
        raise InvalidParameterError("pair members must belong to the region set")
    keys = sorted(regions)
    lam = _weight_vector(keys, weights, "region weight")
    mat = np.stack([np.asarray(regions[k], dtype=np.float64) for k in keys])
    w = lam[:, None] * mat
    pos_i = keys.index(i)
    pos_j = keys.index(j)
    logits = (w @ w[pos_i]) / tau
    logits[pos_i] = -np.inf
    m = np.max(logits)
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[pos_j])


def local_compactness_loss(
    batch: EmbeddingBatch,
    weights: Mapping[RegionIndex, float],
    tau: float,
) -> tuple[float, dict[RegionIndex, np.ndarray]]:
    """Weighted contrastive loss over all ordered same-class region pairs.

    The sum of pair terms is divided by the number of unordered same-class
    pairs; classes with fewer than two regions contribute neither pairs nor
    normalizer mass. Returns the value and its gradient per region embedding.
    """
    if tau <= 0.0:
        raise InvalidParameterError("tau must be positive")
    keys, mat = _region_matrix(batch)
    zero = {k: np.zeros(mat.shape[1]) for k in keys}
    n = len(keys)
    if n < 2:
        return 0.0, zero

    lam = _weight_vector(keys, weights, "region weight")
    class_ids = np.array([k.class_id for k in keys])
    same = class_ids[:, None] == class_ids[None, :]
    np.fill_diagonal(same, False)
    partners = same.sum(axis=1)

    _, counts = np.unique(class_ids, return_counts=True)
    normalizer = float(np.sum(counts * (counts - 1) / 2.0))
    if normalizer == 0.0:
        return 0.0, zero

    w = lam[:, None] * mat
    s = (w @ w.T) / tau
    masked = s.copy()
    np.fill_diagonal(masked, -np.inf)
    row_max = masked.max(axis=1)
    lse = row_max + np.log(np.exp(masked - row_max[:, None]).sum(axis=1))

    value = float((-(s[same]).sum() + (partners * lse).sum()) / normalizer)

    prob = np.exp(masked - lse[:, None])
    g = (-same.astype(np.float64) + partners[:, None] * prob) / normalizer
    grad_w = ((g + g.T) @ w) / tau
    grad = lam[:, None] * grad_w
    return value, {k: grad[p] for p, k in enumerate(keys)}


def class_prototypes(
    image_embeddings: Mapping[int, np.ndarray],
    omega: Mapping[int, float],
    labels: Mapping[int, int],
) -> dict[int, np.ndarray]:
    """Image-weight-weighted class means of the image embeddings.

    Each prototype is the sum of omega-scaled member embeddings divided by
    the member count; no renormalization is applied.
    """
    ids = sorted(image_embeddings)
    if not ids:
        raise EmptyClassError("no image embeddings")
    w = _weight_vector(ids, omega, "image weight")
    missing = [i for i in ids if i not in labels]
    if missing:
        raise InvalidParameterError(f"labels missing for samples {missing}")
    protos: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for pos, sid in enumerate(ids):
        c = labels[sid]
        vec = w[pos] * np.asarray(image_embeddings[sid], dtype=np.float64)
        if c in protos:
            protos[c] = protos[c] + vec
        else:
            protos[c] = vec
        counts[c] = counts.get(c, 0) + 1
    return {c: protos[c] / counts[c] for c in sorted(protos)}


def region_class_posterior(
    region: np.ndarray, prototypes: Mapping[int, np.ndarray], pi: float
) -> np.ndarray:
    """Softmax over cosine similarities to the class prototypes, sharpened by pi.

    Entries follow ascending class id.
    """
    classes = sorted(prototypes)
    if not classes:
        raise EmptyClassError("no prototypes")
    sims = np.array([cosine_similarity(region, prototypes[c]) for c in classes])
    return softmax(sims, temperature=pi)


def global_dispersion_loss(
    batch: EmbeddingBatch,
    weights: Mapping[RegionIndex, float],
    omega: Mapping[int, float],
    labels: Mapping[int, int],
    pi: float,
) -> tuple[float, dict[RegionIndex, np.ndarray], dict[int, np.ndarray]]:
    """Weighted cross-entropy of region posteriors against class prototypes.

    Every region is scored against the prototypes of all classes by cosine
    similarity; its negative log-posterior at its own (possibly corrupted)
    class is scaled by the region weight and averaged over all regions.
    Gradients flow both into the region embeddings and, through the
    prototypes, into the image embeddings.
    """
    if pi <= 0.0:
        raise InvalidParameterError("pi must be positive")
    rkeys, r = _region_matrix(batch)
    ids, e = _image_matrix(batch)
    lam = _weight_vector(rkeys, weights, "region weight")
    w_img = _weight_vector(ids, omega, "image weight")
    missing = [i for i in ids if i not in labels]
    if missing:
        raise InvalidParameterError(f"labels missing for samples {missing}")

    classes = sorted({labels[i] for i in ids})
    class_pos = {c: m for m, c in enumerate(classes)}
    for key in rkeys:
        if key.class_id not in class_pos:
            raise EmptyClassError(f"region {key} labeled with class {key.class_id} that has no images")

    y = np.array([labels[i] for i in ids])
    counts = np.array([(y == c).sum() for c in classes], dtype=np.float64)
    member = np.stack([(y == c).astype(np.float64) for c in classes])  # (C, n_img)
    protos = (member * w_img[None, :]) @ e / counts[:, None]  # (C, dim)

    p_norm = np.linalg.norm(protos, axis=1)
    if np.any(p_norm == 0.0):
        dead = classes[int(np.argmin(p_norm))]
        raise DegenerateVectorError(f"class {dead} prototype has zero norm")
    r_norm = np.linalg.norm(r, axis=1)
    if np.any(r_norm == 0.0):
        raise DegenerateVectorError("zero-norm region embedding")

    cosines = (r @ protos.T) / (r_norm[:, None] * p_norm[None, :])
    logits = cosines / pi
    row_max = logits.max(axis=1)
    lse = row_max + np.log(np.exp(logits - row_max[:, None]).sum(axis=1))
    q = np.exp(logits - lse[:, None])

    ycol = np.array([class_pos[k.class_id] for k in rkeys])
    n_regions = len(rkeys)
    picked = logits[np.arange(n_regions), ycol]
    value = float(np.sum(lam * (lse - picked)) / n_regions)

    onehot = np.zeros_like(q)
    onehot[np.arange(n_regions), ycol] = 1.0
    d = (lam[:, None] * (q - onehot)) / (pi * n_regions)  # d value / d cosines

    proto_unit = protos / p_norm[:, None]
    a = d @ proto_unit
    srow = (d * cosines).sum(axis=1)
    grad_r = a / r_norm[:, None] - (srow / r_norm**2)[:, None] * r

    r_unit = r / r_norm[:, None]
    tcol = (d * cosines).sum(axis=0)
    grad_p = (d.T @ r_unit) / p_norm[:, None] - (tcol / p_norm**2)[:, None] * protos

    scale = w_img / counts[np.searchsorted(classes, y)]
    grad_e = scale[:, None] * grad_p[[class_pos[c] for c in y]]

    return (
        value,
        {k: grad_r[p] for p, k in enumerate(rkeys)},
        {sid: grad_e[p] for p, sid in enumerate(ids)},
    )


def combined_loss(
    batch: EmbeddingBatch,
    weights: Mapping[RegionIndex, float],
    omega: Mapping[int, float],
    labels: Mapping[int, int],
    hp: LossHyperparams,
    include_local: bool = True,
    include_global: bool = True,
) -> LossValue:
    """beta-weighted sum of the two losses with merged gradients.

    The include flags exist for ablations; a disabled component contributes
    exactly zero to the value and the gradients.
    """
    rkeys = sorted(batch.region_embeddings)
    dim = batch.embed_dim
    region_grads = {k: np.zeros(dim) for k in rkeys}
    image_grads = {i: np.zeros(dim) for i in sorted(batch.image_embeddings)}

    l_local = 0.0
    if include_local:
        l_local, local_grads = local_compactness_loss(batch, weights, hp.tau)
        for k, gvec in local_grads.items():
            region_grads[k] = region_grads[k] + hp.beta * gvec

    l_global = 0.0
    if include_global:
        l_global, reg_g, img_g = global_dispersion_loss(batch, weights, omega, labels, hp.pi)
        for k, gvec in reg_g.items():
            region_grads[k] = region_grads[k] + gvec
        for i, gvec in img_g.items():
            image_grads[i] = image_grads[i] + gvec

    return LossValue(
        l_local=l_local,
        l_global=l_global,
        combined=hp.beta * l_local + l_global,
        region_grads=region_grads,
        image_grads=image_grads,
    )
