"""Interpretability signals from an eval-mode forward pass, and overlay data.

Overlays are emitted as records (coordinates plus values), never images.
All tie-breaking resolves to the smallest index or lexicographically
smallest identifier.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .autodiff import ContractError

UNRANKED = "unranked"
TIE_RULES = {
    "hard_assign": "argmax, ties to the smallest prototype index",
    "rank_value": "within-slide average-tie rank, (rank - 1) / (N - 1), single patch -> 0",
    "pathway_label": "largest rank difference, ties to the lexicographically smallest pathway id",
    "exemplars": "descending similarity, ties to the earlier patch",
}


@dataclass
class SignalBundle:
    patient_id: str
    alpha: np.ndarray | None  # N x K
    sims: np.ndarray | None  # N x K
    hard_assign: np.ndarray | None  # N
    wsi_gate: np.ndarray | None  # K
    gene_pathway_attention: tuple | None  # (gene idx, pathway idx, coeff)
    pathway_gate: np.ndarray | None  # P
    gene_importance_sum: np.ndarray | None  # G
    gene_importance_avg: np.ndarray | None  # G
    cross_attention: np.ndarray | None  # K x P
    fusion_gate: np.ndarray | None  # K
    genes: list
    pathways: list
    coords: np.ndarray | None = None
    slide_ids: list | None = None

    @property
    def per_prototype_profile(self):
        return self.cross_attention

    def dense_gene_attention(self):
        mat = np.zeros((len(self.genes), len(self.pathways)))
        g, p, c = self.gene_pathway_attention
        mat[g, p] = c
        return mat

    def simplex_errors(self):
        """Largest deviation from 1 for each simplex-valued signal present."""
        errs = {}
        if self.alpha is not None:
            errs["alpha"] = float(np.abs(self.alpha.sum(axis=1) - 1).max())
            errs["wsi_gate"] = abs(float(self.wsi_gate.sum()) - 1)
        if self.pathway_gate is not None:
            errs["pathway_gate"] = abs(float(self.pathway_gate.sum()) - 1)
            dense = self.dense_gene_attention()
            covered = dense.sum(axis=0) > 0
            errs["gene_pathway_attention"] = float(np.abs(dense.sum(axis=0)[covered] - 1).max(initial=0.0))
        if self.cross_attention is not None:
            errs["cross_attention"] = float(np.abs(self.cross_attention.sum(axis=1) - 1).max())
            errs["fusion_gate"] = abs(float(self.fusion_gate.sum()) - 1)
        return errs


def gene_importance(dense_attention, pathway_gate):
    """Sum variant sum_p a_gp w_p and average variant sum_p a_gp / #{p: a_gp > 0}."""
    total = dense_attention @ pathway_gate
    n_member = (dense_attention > 0).sum(axis=1)
    avg = np.divide(dense_attention.sum(axis=1), n_member, out=np.zeros(dense_attention.shape[0]), where=n_member > 0)
    return total, avg


def extract_signals(out, graph, bag=None, patient_id=""):
    """Collect every signal from one forward pass; refuses training-mode passes."""
    if out.training:
        raise ContractError("signals must come from an eval-mode forward pass (dropout off)")
    proto, path, fus = out.prototype, out.pathway, out.fusion
    genes, pathways = graph.genes, graph.pathways
    alpha = sims = hard = wgate = None
    if proto is not None:
        alpha, sims, hard, wgate = proto.alpha.data, proto.sims, proto.hard_assign, proto.gate_weights.data
    gpa = pgate = isum = iavg = None
    if path is not None:
        gpa = path.gene_pathway_attention
        pgate = path.gate_weights.data
        isum, iavg = gene_importance(path.dense_attention(graph.G, graph.P), pgate)
    cross = fgate = None
    if fus is not None and fus.attention is not None:
        cross, fgate = fus.attention.data, fus.fusion_gate_weights.data
    return SignalBundle(
        patient_id=patient_id or (bag.patient_id if bag is not None else ""),
        alpha=alpha,
        sims=sims,
        hard_assign=hard,
        wsi_gate=wgate,
        gene_pathway_attention=gpa,
        pathway_gate=pgate,
        gene_importance_sum=isum,
        gene_importance_avg=iavg,
        cross_attention=cross,
        fusion_gate=fgate,
        genes=genes,
        pathways=pathways,
        coords=None if bag is None else bag.coords,
        slide_ids=None if bag is None else list(bag.slide_ids),
    )


@dataclass
class OverlayRecord:
    slide_id: str
    x: float
    y: float
    prototype: int
    pathway_id: str | None = None
    raw_value: float | None = None
    rank_value: float | None = None


def rank_transform(values):
    """(rank - 1) / (N - 1) with average ties; a single value maps to 0."""
    v = np.asarray(values, dtype=np.float64)
    if v.size <= 1:
        return np.zeros(v.size)
    return (rankdata(v, method="average") - 1.0) / (v.size - 1.0)


def within_slide_ranks(values, slide_ids):
    values = np.asarray(values, dtype=np.float64)
    out = np.empty_like(values)
    slides = np.asarray(slide_ids)
    for s in sorted(set(slide_ids)):
        mask = slides == s
        out[mask] = rank_transform(values[mask])
    return out


def _require_wsi(bundle):
    if bundle.hard_assign is None or bundle.coords is None:
        raise ContractError("overlay needs prototype assignments and patch coordinates")


def prototype_overlay(bundle):
    _require_wsi(bundle)
    return [
        OverlayRecord(s, float(x), float(y), int(k))
        for s, (x, y), k in zip(bundle.slide_ids, bundle.coords, bundle.hard_assign)
    ]


def top_pathways(row_stats, high_risk):
    """Per prototype, the pathway with the largest (high risk) or most negative
    (low risk) mean rank difference; ties go to the smallest pathway id."""
    labels = {}
    for k, results in row_stats.items():
        if not results:
            continue
        sign = 1.0 if high_risk else -1.0
        best = min(results, key=lambda r: (-sign * r.mean_rank_diff, r.entity))
        labels[k] = best.entity
    return labels


def pathway_overlay(bundle, row_stats, high_risk):
    """Label patches with their prototype's risk-group pathway, or ``unranked``."""
    _require_wsi(bundle)
    labels = top_pathways(row_stats, high_risk)
    return [
        OverlayRecord(s, float(x), float(y), int(k), labels.get(int(k), UNRANKED))
        for s, (x, y), k in zip(bundle.slide_ids, bundle.coords, bundle.hard_assign)
    ]


def _heatmap(bundle, raw, pathway_id=None):
    ranks = within_slide_ranks(raw, bundle.slide_ids)
    return [
        OverlayRecord(s, float(x), float(y), int(k), pathway_id, float(r), float(q))
        for s, (x, y), k, r, q in zip(bundle.slide_ids, bundle.coords, bundle.hard_assign, raw, ranks)
    ]


def _require_cross(bundle):
    _require_wsi(bundle)
    if bundle.cross_attention is None:
        raise ContractError("heatmaps need cross-attention signals")


def single_pathway_heatmap(bundle, pathway_id):
    _require_cross(bundle)
    if pathway_id not in bundle.pathways:
        raise KeyError(f"unknown pathway {pathway_id!r}")
    p = bundle.pathways.index(pathway_id)
    return _heatmap(bundle, bundle.cross_attention[bundle.hard_assign, p], pathway_id)


def single_gene_heatmap(bundle, gene):
    _require_cross(bundle)
    if gene not in bundle.genes:
        raise KeyError(f"unknown gene {gene!r}")
    weights = bundle.dense_gene_attention()[bundle.genes.index(gene)]
    per_proto = bundle.cross_attention @ weights
    return _heatmap(bundle, per_proto[bundle.hard_assign])


def extract_exemplars(bundles, m=8):
    """Top-``m`` patches per prototype by pre-softmax similarity, pooled over
    ``bundles``; prototypes are listed by descending mean gate weight."""
    sims = np.concatenate([b.sims for b in bundles])
    meta = [(b.patient_id, s, float(x), float(y)) for b in bundles for s, (x, y) in zip(b.slide_ids, b.coords)]
    gates = np.mean([b.wsi_gate for b in bundles], axis=0)
    order = sorted(range(sims.shape[1]), key=lambda k: (-gates[k], k))
    result = {}
    for k in order:
        top = np.argsort(-sims[:, k], kind="stable")[:m]
        result[k] = [
            {"patient_id": meta[i][0], "slide_id": meta[i][1], "x": meta[i][2], "y": meta[i][3], "similarity": float(sims[i, k])}
            for i in top
        ]
    return result


# serialisation

OVERLAY_FIELDS = ["slide_id", "x", "y", "prototype", "pathway_id", "raw_value", "rank_value"]


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def overlay_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OVERLAY_FIELDS)
    for r in records:
        w.writerow([_cell(getattr(r, f)) for f in OVERLAY_FIELDS])
    return buf.getvalue()


def read_overlay_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != OVERLAY_FIELDS:
        raise ValueError(f"overlay header must be {OVERLAY_FIELDS}")
    out = []
    for row in rows[1:]:
        s, x, y, k, pid, raw, rank = row
        out.append(
            OverlayRecord(s, float(x), float(y), int(k), pid or None, float(raw) if raw else None, float(rank) if rank else None)
        )
    return out


def overlay_meta(kind, downsample=1.0, **extra):
    meta = {"kind": kind, "downsample": downsample, "tie_rules": TIE_RULES}
    meta.update(extra)
    return json.dumps(meta, indent=2, sort_keys=True) + "\n"


def signal_dump(bundle):
    """JSON-ready dict; dense arrays except the sparse gene-pathway triplets."""

    def arr(a):
        return None if a is None else np.asarray(a).tolist()

    gpa = None
    if bundle.gene_pathway_attention is not None:
        g, p, c = bundle.gene_pathway_attention
        gpa = [[bundle.genes[i], bundle.pathways[j], float(v)] for i, j, v in zip(g, p, c)]
    return {
        "patient_id": bundle.patient_id,
        "alpha": arr(bundle.alpha),
        "wsi_gate": arr(bundle.wsi_gate),
        "gene_pathway_attention": gpa,
        "pathway_gate": arr(bundle.pathway_gate),
        "gene_importance_sum": arr(bundle.gene_importance_sum),
        "gene_importance_avg": arr(bundle.gene_importance_avg),
        "cross_attention": arr(bundle.cross_attention),
        "fusion_gate": arr(bundle.fusion_gate),
        "hard_assign": arr(bundle.hard_assign),
        "sims": arr(bundle.sims),
        "genes": bundle.genes,
        "pathways": bundle.pathways,
    }
