"""Rank-based population analysis of per-patient importance signals.

Everything here works on within-patient ranks, so results are invariant to
any strictly increasing transform of the raw scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np
from scipy.stats import rankdata

from .autodiff import ContractError
from .survival import median_risk_split

P_CLAMP = 1e-15
_STD = NormalDist()

ENTITY_KINDS = (
    "pathway_gate",
    "gene_importance",
    "within_pathway_genes",
    "prototype_gate",
    "fusion_gate",
    "cross_attention_row",
)
PROTOTYPE_KINDS = frozenset({"prototype_gate", "fusion_gate", "cross_attention_row"})


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def normal_quantile(p):
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal quantile needs p in (0, 1), got {p}")
    return _STD.inv_cdf(p)


def within_patient_ranks(values):
    """Average-tie ranks along the last axis; rank 1 is the smallest value."""
    values = np.asarray(values, dtype=np.float64)
    return rankdata(values, method="average", axis=-1)


def _u_low_wins(low, high):
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    diff = low[:, None] - high[None, :]
    return float((diff > 0).sum() + 0.5 * (diff == 0).sum())


def _exact_two_sided(low, high):
    """Permutation p-value of U via a subset-sum DP over doubled mid-ranks."""
    n_low, n_high = len(low), len(high)
    pooled = np.concatenate([low, high])
    doubled = np.rint(2 * rankdata(pooled, method="average")).astype(np.int64)
    total = int(doubled.sum())
    # counts[j][s]: number of size-j subsets whose doubled rank sum is s
    counts = np.zeros((n_low + 1, total + 1), dtype=object)
    counts[0][0] = 1
    for r in doubled:
        for j in range(min(n_low, len(doubled)), 0, -1):
            counts[j][r:] = counts[j][r:] + counts[j - 1][: total + 1 - r]
    dist = counts[n_low]
    n_perm = sum(dist)
    # doubled rank sum minus n_low(n_low+1) equals 2U; 2*E[U] = n_low*n_high
    offset = n_low * (n_low + 1)
    two_mu = n_low * n_high
    dev = abs(int(doubled[:n_low].sum()) - offset - two_mu)
    hits = 0
    for s in range(total + 1):
        c = dist[s]
        if c and abs(s - offset - two_mu) >= dev:
            hits += c
    return float(hits) / float(n_perm)


def mann_whitney(low, high, mode="normal"):
    """Two-sided Mann-Whitney test; U counts pairs where the low-group value wins.

    ``mode="normal"`` uses the tie- and continuity-corrected normal
    approximation; ``mode="exact"`` the full permutation distribution.
    """
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    n_low, n_high = low.size, high.size
    if n_low < 1 or n_high < 1:
        raise ValueError("both groups need at least one observation")
    u = _u_low_wins(low, high)
    if mode == "exact":
        return u, _exact_two_sided(low, high)
    if mode != "normal":
        raise ValueError(f"unknown mode {mode!r}")
    n = n_low + n_high
    mu = n_low * n_high / 2.0
    _, tie_counts = np.unique(np.concatenate([low, high]), return_counts=True)
    tie_term = float((tie_counts**3 - tie_counts).sum()) / (n * (n - 1)) if n > 1 else 0.0
    var = n_low * n_high / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        return u, 1.0
    z = max(abs(u - mu) - 0.5, 0.0) / math.sqrt(var)
    return u, min(1.0, 2.0 * (1.0 - normal_cdf(z)))


def rank_biserial(u, n_low, n_high):
    return 1.0 - 2.0 * u / (n_low * n_high)


def stouffer_combine(pvalues, effects, sizes):
    """Weighted Stouffer Z with weights sqrt(n); returns (Z, p, weighted effect)."""
    p = np.clip(np.asarray(pvalues, dtype=np.float64), P_CLAMP, 1.0 - P_CLAMP)
    r = np.asarray(effects, dtype=np.float64)
    w = np.sqrt(np.asarray(sizes, dtype=np.float64))
    if p.size < 2:
        raise ContractError("Stouffer combination needs at least two folds")
    z = np.array([normal_quantile(1.0 - pk / 2.0) for pk in p]) * np.sign(r)
    big_z = float((w * z).sum() / math.sqrt((w * w).sum()))
    combined_p = 2.0 * (1.0 - normal_cdf(abs(big_z)))
    return big_z, combined_p, float((w * r).sum() / w.sum())


def bh_fdr(pvalues, alpha=0.05):
    """Benjamini-Hochberg step-up; returns (q-values, significant flags)."""
    p = np.asarray(pvalues, dtype=np.float64)
    m = p.size
    if m == 0:
        return p.copy(), np.zeros(0, dtype=bool)
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    q = np.empty(m)
    q[order] = q_sorted
    return q, q <= alpha


@dataclass
class FoldTestResult:
    entity: str
    fold: int
    u: float
    p: float
    r: float
    mean_rank_diff: float
    n_low: int
    n_high: int


@dataclass
class MetaResult:
    entity: str
    z: float
    p: float
    effect: float
    q: float = float("nan")
    significant: bool = False
    folds_used: int = 0
    combinable: bool = True


@dataclass
class FoldSignals:
    """One fold's per-patient entity scores (patients x entities) and risks."""

    fold: int
    values: np.ndarray
    risks: np.ndarray
    entities: list = field(default_factory=list)


@dataclass
class AnalysisResult:
    kind: str
    per_fold: list
    meta: list | None = None
    excluded_folds: list = field(default_factory=list)


def fold_tests(fs: FoldSignals, mode="normal"):
    """Median split, within-patient ranks, then one MWU per entity.

    Returns None when either group has fewer than two patients.
    """
    values = np.asarray(fs.values, dtype=np.float64)
    high = median_risk_split(fs.risks)
    n_high = int(high.sum())
    n_low = int((~high).sum())
    if n_low < 2 or n_high < 2:
        return None
    ranks = within_patient_ranks(values)
    entities = fs.entities or [str(j) for j in range(values.shape[1])]
    out = []
    for j, name in enumerate(entities):
        lo, hi = ranks[~high, j], ranks[high, j]
        u, p = mann_whitney(lo, hi, mode=mode)
        out.append(
            FoldTestResult(
                entity=name,
                fold=fs.fold,
                u=u,
                p=p,
                r=rank_biserial(u, n_low, n_high),
                mean_rank_diff=float(hi.mean() - lo.mean()),
                n_low=n_low,
                n_high=n_high,
            )
        )
    return out


def combine_folds(per_fold, fold_sizes, alpha=0.05):
    """Stouffer-combine per-entity results across folds, then BH across entities."""
    by_entity = {}
    for res in per_fold:
        by_entity.setdefault(res.entity, []).append(res)
    meta = []
    for name in sorted(by_entity):
        rows = by_entity[name]
        if len(rows) < 2:
            meta.append(MetaResult(name, float("nan"), float("nan"), float("nan"), folds_used=len(rows), combinable=False))
            continue
        z, p, eff = stouffer_combine([r.p for r in rows], [r.r for r in rows], [fold_sizes[r.fold] for r in rows])
        meta.append(MetaResult(name, z, p, eff, folds_used=len(rows)))
    usable = [m for m in meta if m.combinable]
    if usable:
        q, sig = bh_fdr([m.p for m in usable], alpha=alpha)
        for m, qi, si in zip(usable, q, sig):
            m.q, m.significant = float(qi), bool(si)
    return meta


def fold_stratified_analysis(folds, kind, combine=None, alpha=0.05, mode="normal"):
    """Per-fold MWU tests for every entity; Stouffer + BH for fold-stable entities.

    Prototype-indexed kinds are never combined across folds; asking for it
    raises :class:`ContractError`.
    """
    if kind not in ENTITY_KINDS:
        raise ValueError(f"unknown entity kind {kind!r}; expected one of {ENTITY_KINDS}")
    is_proto = kind in PROTOTYPE_KINDS
    if combine and is_proto:
        raise ContractError(f"{kind}: prototype identities differ across folds and cannot be combined")
    if combine is None:
        combine = not is_proto
    per_fold, excluded, sizes = [], [], {}
    for fs in folds:
        res = fold_tests(fs, mode=mode)
        if res is None:
            excluded.append(fs.fold)
            continue
        sizes[fs.fold] = len(fs.risks)
        per_fold.extend(res)
    meta = combine_folds(per_fold, sizes, alpha=alpha) if combine else None
    return AnalysisResult(kind=kind, per_fold=per_fold, meta=meta, excluded_folds=excluded)


@dataclass
class GatingShift:
    delta: np.ndarray  # patients x K
    mean_delta: np.ndarray  # K
    tests: list  # FoldTestResult per prototype, on delta values


def gating_shift(wsi_gates, fusion_gates, risks, fold=0):
    """Within-patient rank change of each prototype from pre- to post-fusion gate."""
    wsi = np.asarray(wsi_gates, dtype=np.float64)
    fus = np.asarray(fusion_gates, dtype=np.float64)
    if wsi.shape != fus.shape:
        raise ValueError(f"gate shapes differ: {wsi.shape} vs {fus.shape}")
    delta = within_patient_ranks(fus) - within_patient_ranks(wsi)
    tests = []
    high = median_risk_split(risks)
    n_low, n_high = int((~high).sum()), int(high.sum())
    if n_low >= 2 and n_high >= 2:
        for k in range(delta.shape[1]):
            lo, hi = delta[~high, k], delta[high, k]
            u, p = mann_whitney(lo, hi)
            tests.append(
                FoldTestResult(str(k), fold, u, p, rank_biserial(u, n_low, n_high), float(hi.mean() - lo.mean()), n_low, n_high)
            )
    return GatingShift(delta=delta, mean_delta=delta.mean(axis=0), tests=tests)


def prototype_row_tests(attention, risks, pathway_ids, fold=0, mode="normal"):
    """Per prototype k, MWU tests on within-patient ranks of attention row k.

    ``attention`` is patients x K x P.  Returns {k: [FoldTestResult per pathway]};
    the lists are empty when a risk group has fewer than two patients.
    """
    attn = np.asarray(attention, dtype=np.float64)
    out = {}
    for k in range(attn.shape[1]):
        res = fold_tests(FoldSignals(fold, attn[:, k, :], risks, list(pathway_ids)), mode=mode)
        out[k] = res or []
    return out
