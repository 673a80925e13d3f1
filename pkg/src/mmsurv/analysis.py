"""Glue between trained folds and the population statistics.

Also hosts the synthetic-cohort experiments used by the acceptance suite and
the scripts in ``scripts/``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .config import TrainConfig
from .interpret import extract_signals
from .stats import FoldSignals, fold_stratified_analysis
from .survival import c_index, risk_score, survival_curve
from .synthetic import SyntheticCohortSpec, generate_synthetic_cohort
from .training import fold_centroids, make_folds, restore_model, run_fold, train_model


@dataclass
class FoldBundles:
    fold: int
    ids: tuple
    risks: np.ndarray
    bundles: list


def fold_bundles(result, cohort):
    """Eval-mode signal bundles for a fold's validation patients."""
    model = restore_model(result.checkpoint, cohort)
    bundles, logits = [], []
    for pid in result.val_ids:
        out = model(cohort.bags[pid].features, cohort.expression[pid], training=False)
        logits.append(out.logits.data)
        bundles.append(extract_signals(out, cohort.graph, cohort.bags[pid], pid))
    risks = risk_score(survival_curve(np.stack(logits)))
    return FoldBundles(result.checkpoint.fold, tuple(result.val_ids), risks, bundles)


def entity_matrix(fb: FoldBundles, kind):
    """Patients x entities matrix and entity names for one signal kind."""
    b0 = fb.bundles[0]
    if kind == "pathway_gate":
        return np.stack([b.pathway_gate for b in fb.bundles]), list(b0.pathways)
    if kind == "gene_importance":
        return np.stack([b.gene_importance_sum for b in fb.bundles]), list(b0.genes)
    if kind == "prototype_gate":
        return np.stack([b.wsi_gate for b in fb.bundles]), [str(k) for k in range(len(b0.wsi_gate))]
    if kind == "fusion_gate":
        return np.stack([b.fusion_gate for b in fb.bundles]), [str(k) for k in range(len(b0.fusion_gate))]
    raise ValueError(f"no matrix form for entity kind {kind!r}")


def within_pathway_matrix(fb: FoldBundles, pathway_id):
    """Gene->pathway attention of one pathway's member genes, per patient."""
    b0 = fb.bundles[0]
    p = b0.pathways.index(pathway_id)
    g, q, _ = b0.gene_pathway_attention
    members = [int(i) for i, j in zip(g, q) if j == p]
    rows = [b.dense_gene_attention()[members, p] for b in fb.bundles]
    return np.stack(rows), [b0.genes[i] for i in members]


def signals_for(fold_bundles_list, kind, pathway_id=None, prototype=None):
    out = []
    for fb in fold_bundles_list:
        if kind == "within_pathway_genes":
            values, names = within_pathway_matrix(fb, pathway_id)
        elif kind == "cross_attention_row":
            values = np.stack([b.cross_attention[prototype] for b in fb.bundles])
            names = list(fb.bundles[0].pathways)
        else:
            values, names = entity_matrix(fb, kind)
        out.append(FoldSignals(fb.fold, values, fb.risks, names))
    return out


# experiments on synthetic cohorts

OVERFIT_SPEC = SyntheticCohortSpec(n_patients=60, k_true=4, seed=0)
OVERFIT_CONFIG = TrainConfig(d=16, K=4, dropout=0.0, lr=2e-3, max_epochs=200)


def overfit_experiment(spec=OVERFIT_SPEC, config=OVERFIT_CONFIG, target=0.95):
    """Train on every patient, stop once the training C-index reaches ``target``.

    Returns (best training C-index, epochs run, seconds).
    """
    start = time.perf_counter()
    cohort = generate_synthetic_cohort(spec)
    ids = cohort.patient_ids
    cent = fold_centroids(config, cohort, ids)
    _, ckpt, history = train_model(config, cohort, ids, centroids=cent, on_epoch=lambda e, m, s: s >= target)
    return ckpt.best_cindex, len(history), time.perf_counter() - start


PLANTED_CONFIG = TrainConfig(d=16, K=4, dropout=0.0, lr=2e-3, max_epochs=15)


def planted_signal_replicate(seed, spec=None, config=PLANTED_CONFIG):
    """Fold-stratified pathway-gate analysis; returns (rank of the planted
    pathway by |Z| starting at 1, meta results sorted by |Z|, cohort)."""
    spec = spec or SyntheticCohortSpec(seed=seed)
    cohort = generate_synthetic_cohort(spec)
    cfg = config.replace(seed=seed)
    cache = {}
    fbs = [fold_bundles(run_fold(cfg, split, cohort, cache), cohort) for split in make_folds(cohort.patient_ids, cfg.n_folds, seed)]
    res = fold_stratified_analysis(signals_for(fbs, "pathway_gate"), "pathway_gate")
    ranked = sorted(res.meta, key=lambda m: (-abs(m.z) if math.isfinite(m.z) else math.inf, m.entity))
    planted = cohort.truth["planted_pathway"]
    rank = 1 + [m.entity for m in ranked].index(planted)
    return rank, ranked, cohort


def null_signal_cindex(seed, spec=None, config=PLANTED_CONFIG):
    """Pooled out-of-fold C-index on a cohort with no planted signal."""
    spec = spec or SyntheticCohortSpec(seed=seed, signal_strength=0.0)
    cohort = generate_synthetic_cohort(spec)
    cfg = config.replace(seed=seed)
    cache = {}
    ids, risks = [], []
    for split in make_folds(cohort.patient_ids, cfg.n_folds, seed):
        r = run_fold(cfg, split, cohort, cache)
        ids.extend(r.val_ids)
        risks.extend(r.val_risks)
    return c_index(risks, [cohort.records[p].time for p in ids], [cohort.records[p].event for p in ids])


def mean_interval(values, z=1.959963984540054):
    """Normal-approximation 95% interval for the mean."""
    v = np.asarray(values, dtype=np.float64)
    half = z * v.std(ddof=1) / math.sqrt(v.size)
    return float(v.mean() - half), float(v.mean() + half)
