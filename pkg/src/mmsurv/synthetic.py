"""Synthetic cohorts with a planted risk pathway and risk-linked morphology."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curation import GeneSet, build_bipartite
from .prototype import PatchBag
from .survival import SurvivalRecord


class SpecError(ValueError):
    pass


@dataclass
class SyntheticCohortSpec:
    n_patients: int = 60
    n_genes: int = 60
    n_pathways: int = 12
    pathway_size: tuple = (4, 10)
    graph_seed: int = 7
    k_true: int = 4
    planted_pathway: int = 0
    signal_strength: float = 2.0
    censoring_rate: float = 0.3
    feature_dim: int = 32
    patches_per_patient: tuple = (30, 60)
    cluster_spread: float = 3.0
    time_shape: float = 8.0
    seed: int = 0

    def validate(self):
        lo, hi = self.pathway_size
        if self.n_patients < 4 or self.n_genes < 2 or self.n_pathways < 1 or self.k_true < 1:
            raise SpecError("cohort needs >= 4 patients, >= 2 genes, >= 1 pathway and >= 1 cluster")
        if not 1 <= lo <= hi:
            raise SpecError(f"invalid pathway size range {self.pathway_size}")
        if hi > self.n_genes:
            raise SpecError(f"pathways of up to {hi} genes cannot be drawn from {self.n_genes} genes")
        if not 0 <= self.planted_pathway < self.n_pathways:
            raise SpecError(f"planted pathway {self.planted_pathway} is not among {self.n_pathways} pathways")
        if self.time_shape <= 0:
            raise SpecError("time_shape must be positive")
        if not 0.0 <= self.censoring_rate < 1.0:
            raise SpecError("censoring rate must lie in [0, 1)")
        plo, phi = self.patches_per_patient
        if not 1 <= plo <= phi:
            raise SpecError(f"invalid patch count range {self.patches_per_patient}")


@dataclass
class Cohort:
    """Aligned multimodal data keyed by patient id."""

    graph: object
    bags: dict
    expression: dict  # patient id -> values in graph gene order
    records: dict
    truth: dict = field(default_factory=dict)

    @property
    def patient_ids(self):
        return sorted(self.records)

    @property
    def feature_dim(self):
        return next(iter(self.bags.values())).features.shape[1]


def pathway_id(i):
    return f"SYN_P{i:03d}"


def gene_name(i):
    return f"G{i:04d}"


def _random_sets(spec, rng):
    lo, hi = spec.pathway_size
    members = [set(rng.choice(spec.n_genes, size=rng.integers(lo, hi + 1), replace=False)) for _ in range(spec.n_pathways)]
    covered = set().union(*members)
    for g in range(spec.n_genes):
        if g not in covered:
            members[int(rng.integers(spec.n_pathways))].add(g)
    return [
        GeneSet(pathway_id(i), f"synthetic pathway {i}", "custom", frozenset(gene_name(g) for g in m))
        for i, m in enumerate(members)
    ]


def generate_synthetic_cohort(spec: SyntheticCohortSpec) -> Cohort:
    spec.validate()
    sets = _random_sets(spec, np.random.default_rng(spec.graph_seed))
    graph = build_bipartite(sets)
    rng = np.random.default_rng(spec.seed)
    n, s = spec.n_patients, spec.signal_strength
    latent = rng.standard_normal(n)

    planted = pathway_id(spec.planted_pathway)
    planted_rows = [graph.gene_index[g] for g in sets[spec.planted_pathway].genes]
    expr = rng.standard_normal((n, graph.G))
    expr[:, planted_rows] += s * latent[:, None]

    centers = rng.standard_normal((spec.k_true, spec.feature_dim)) * spec.cluster_spread
    tilt = np.linspace(-1.0, 1.0, spec.k_true)
    bags, labels = {}, {}
    pids = [f"SYN{i:04d}" for i in range(n)]
    plo, phi = spec.patches_per_patient
    for i, pid in enumerate(pids):
        logits = s * latent[i] * tilt
        mix = np.exp(logits - logits.max())
        mix /= mix.sum()
        m = int(rng.integers(plo, phi + 1))
        lab = rng.choice(spec.k_true, size=m, p=mix)
        feats = centers[lab] + rng.standard_normal((m, spec.feature_dim))
        coords = rng.integers(0, 50, size=(m, 2)) * 256
        bags[pid] = PatchBag(pid, feats, coords, f"{pid}-slide0")
        labels[pid] = lab

    # log T = log 60 - s * latent + Gumbel noise / time_shape; shape 1 is exponential
    times = 60.0 * np.exp(-s * latent) * rng.weibull(spec.time_shape, size=n)
    censored = rng.random(n) < spec.censoring_rate
    cut = rng.random(n)
    records = {}
    for i, pid in enumerate(pids):
        t = times[i] * cut[i] if censored[i] else times[i]
        records[pid] = SurvivalRecord(pid, float(max(t, 1e-3)), int(not censored[i]))

    truth = {
        "risk": dict(zip(pids, latent.tolist())),
        "planted_pathway": planted,
        "cluster_labels": labels,
        "cluster_centers": centers,
    }
    return Cohort(graph, bags, {pid: expr[i] for i, pid in enumerate(pids)}, records, truth)
