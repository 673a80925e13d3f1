"""Learnable prototype compression of a patch bag into K gated tokens."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import MiniBatchKMeans

from . import autodiff as ad
from .layers import Linear, Module, gate_pool, uniform_fan_in


MASS_EPS = 1e-12


class InitError(ValueError):
    pass


@dataclass
class PatchBag:
    """One patient's patch features (N x D) with slide coordinates (N x 2)."""

    patient_id: str
    features: np.ndarray
    coords: np.ndarray
    slide_ids: list

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        if isinstance(self.slide_ids, str):
            self.slide_ids = [self.slide_ids] * len(self.features)
        n = self.features.shape[0]
        if self.features.ndim != 2 or n < 1:
            raise ValueError(f"{self.patient_id}: bag needs an N x D feature matrix with N >= 1")
        if self.coords.shape[0] != n or len(self.slide_ids) != n:
            raise ValueError(f"{self.patient_id}: coords/slide ids do not match {n} patches")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.patient_id}: non-finite patch features")

    @property
    def n(self):
        return self.features.shape[0]


def concat_bags(bags):
    """Merge a patient's slides into one bag, preserving per-patch slide ids."""
    return PatchBag(
        bags[0].patient_id,
        np.concatenate([b.features for b in bags]),
        np.concatenate([b.coords for b in bags]),
        [s for b in bags for s in b.slide_ids],
    )


def sample_counts(patch_counts, budget):
    """Per-slide sample sizes max(1, floor(N_i * budget / N_total)), capped at N_i."""
    counts = np.asarray(patch_counts, dtype=np.int64)
    total = counts.sum()
    n = np.maximum(1, (counts * budget) // total)
    return np.minimum(n, counts)


def kmeans_init(bags, k, budget=100_000, batch_size=1024, restarts=10, seed=42):
    """Unit-norm K x D centroids from cosine k-means over sampled training patches.

    Rows are L2-normalised so squared Euclidean distance equals 2(1 - cos).
    """
    rng = np.random.default_rng(seed)
    counts = sample_counts([b.n for b in bags], budget)
    picks = [b.features[rng.choice(b.n, size=c, replace=False)] for b, c in zip(bags, counts)]
    x = np.concatenate(picks)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    x = x / np.where(norms > 0, norms, 1.0)
    if np.unique(np.round(x, 12), axis=0).shape[0] < k:
        raise InitError(f"need at least {k} distinct patch samples for k-means, got fewer")
    km = MiniBatchKMeans(
        n_clusters=k,
        init="k-means++",
        batch_size=batch_size,
        n_init=restarts,
        random_state=seed,
    ).fit(x)
    c = km.cluster_centers_.astype(np.float64)
    return c / np.linalg.norm(c, axis=1, keepdims=True)


@dataclass
class PrototypeOutput:
    alpha: ad.Tensor  # N x K
    sims: np.ndarray  # N x K, before temperature and softmax
    tokens: ad.Tensor  # K x d
    gate_weights: ad.Tensor  # K
    wsi_embedding: ad.Tensor  # d
    hard_assign: np.ndarray  # N


def hard_assign(alpha):
    """Row argmax; ties resolve to the smallest prototype index."""
    return np.argmax(np.asarray(alpha), axis=1)


class PrototypeEncoder(Module):
    def __init__(self, rng, in_dim, dim, k, tau=0.1, init_centroids=None):
        if k < 1 or tau <= 0:
            raise ValueError("need K >= 1 and tau > 0")
        if init_centroids is None:
            c = rng.standard_normal((k, in_dim))
            init_centroids = c / np.linalg.norm(c, axis=1, keepdims=True)
        init_centroids = np.asarray(init_centroids, dtype=np.float64)
        if init_centroids.shape != (k, in_dim):
            raise ValueError(f"centroids must be {(k, in_dim)}, got {init_centroids.shape}")
        self.prototypes = ad.parameter(init_centroids)
        # shared projection f, no bias so cosine geometry is a linear image
        self.proj = ad.parameter(uniform_fan_in(rng, in_dim, (in_dim, dim)))
        self.gate = Linear(rng, dim, 1, bias=False)
        self.tau = tau
        self.k = k

    def soft_assign(self, features):
        projected = ad.matmul(features, self.proj)
        cproj = ad.matmul(self.prototypes, self.proj)
        sims = ad.matmul(ad.l2_normalize_rows(projected), ad.transpose(ad.l2_normalize_rows(cproj)))
        alpha = ad.softmax_last(sims * (1.0 / self.tau))
        return projected, sims, alpha

    def __call__(self, features):
        features = ad.as_tensor(features)
        projected, sims, alpha = self.soft_assign(features)
        mass = ad.tsum(alpha, axis=0)  # K
        weighted = ad.matmul(ad.transpose(alpha), projected)  # K x d
        # guard only near-empty prototypes so ordinary tokens are exact weighted means
        guard = np.where(mass.data < MASS_EPS, MASS_EPS, 0.0)
        tokens = weighted / ad.reshape(mass + guard, (-1, 1))
        gates, pooled = gate_pool(self.gate(tokens), tokens)
        return PrototypeOutput(
            alpha=alpha,
            sims=sims.data,
            tokens=tokens,
            gate_weights=gates,
            wsi_embedding=pooled,
            hard_assign=hard_assign(alpha.data),
        )
