"""Gene expression encoder over the bipartite gene-pathway graph.

Two mean-aggregation SAGE layers feed a layer norm and a final GATv2 layer
whose gene->pathway coefficients are the reported gene importances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .curation import BipartiteGraph
from .layers import LayerNorm, Linear, Module, gate_pool, uniform_fan_in


class AlignmentError(ValueError):
    pass


def build_node_features(expr, graph: BipartiteGraph):
    """(G+P) x 1 matrix: gene rows hold expression, pathway rows hold zero."""
    expr = np.asarray(expr, dtype=np.float64).reshape(-1)
    if expr.size != graph.G:
        raise AlignmentError(f"expression has {expr.size} values but the graph has {graph.G} genes")
    if not np.all(np.isfinite(expr)):
        raise AlignmentError("expression contains non-finite values")
    return np.concatenate([expr, np.zeros(graph.P)]).reshape(-1, 1)


class SageLayer(Module):
    """x' = x W_self + mean_{u in N(v)} x_u W_neigh + b (activation applied by caller)."""

    def __init__(self, rng, n_in, n_out):
        self.self_map = Linear(rng, n_in, n_out, bias=True)
        self.neigh_map = Linear(rng, n_in, n_out, bias=False)

    def __call__(self, x, src, dst, n_nodes):
        neigh = ad.segment_mean(ad.gather_rows(x, src), dst, n_nodes)
        return self.self_map(x) + self.neigh_map(neigh)


class GATv2Layer(Module):
    """Multi-head GATv2 with head-averaged output and no bias.

    Score for edge u->v in head h: a_h . LeakyReLU(x_u W_src_h + x_v W_dst_h),
    normalised over the in-edges of v.  Messages are x_u W_src_h.
    """

    def __init__(self, rng, dim, heads):
        self.dim, self.heads = dim, heads
        self.w_src = ad.parameter(uniform_fan_in(rng, dim, (dim, heads * dim)))
        self.w_dst = ad.parameter(uniform_fan_in(rng, dim, (dim, heads * dim)))
        self.attn = ad.parameter(uniform_fan_in(rng, dim, (heads, dim)))

    def __call__(self, x, src, dst, n_nodes):
        e, h, d = len(src), self.heads, self.dim
        xs = ad.matmul(x, self.w_src)
        xd = ad.matmul(x, self.w_dst)
        msg = ad.reshape(ad.gather_rows(xs, src), (e, h, d))
        hidden = ad.leaky_relu(msg + ad.reshape(ad.gather_rows(xd, dst), (e, h, d)))
        scores = ad.tsum(hidden * self.attn, axis=-1)  # E x H
        coeff = ad.segment_softmax(scores, dst, n_nodes)
        weighted = msg * ad.reshape(coeff, (e, h, 1))
        out = ad.reshape(ad.segment_sum(ad.reshape(weighted, (e, h * d)), dst, n_nodes), (n_nodes, h, d))
        return ad.tmean(out, axis=1), coeff


@dataclass
class PathwayOutput:
    pathway_embeddings: ad.Tensor  # P x d
    gene_pathway_attention: tuple  # (gene idx, pathway idx, coefficient) arrays
    gate_weights: ad.Tensor  # P
    pathway_embedding_pooled: ad.Tensor  # d

    def dense_attention(self, n_genes, n_pathways):
        g, p, c = self.gene_pathway_attention
        mat = np.zeros((n_genes, n_pathways))
        mat[g, p] = c
        return mat


class PathwayEncoder(Module):
    def __init__(self, rng, graph: BipartiteGraph, dim, heads=2, dropout=0.25, sage_layers=2):
        if sage_layers < 1:
            raise ValueError("need at least one SAGE layer before the attention layer")
        self.graph = graph
        src, dst = graph.directed_edges()
        self._src, self._dst = src, dst
        self._n_members = len(graph.memberships)
        self.sage = [SageLayer(rng, 1 if i == 0 else dim, dim) for i in range(sage_layers)]
        self.norm = LayerNorm(dim)
        self.gat = GATv2Layer(rng, dim, heads)
        self.gate = Linear(rng, dim, 1, bias=False)
        self.dropout = dropout

    def __call__(self, expr, rng=None, training=False):
        g, p = self.graph.G, self.graph.P
        n = g + p
        x = ad.as_tensor(build_node_features(expr, self.graph))
        for layer in self.sage:
            x = ad.leaky_relu(layer(x, self._src, self._dst, n))
            x = ad.dropout(x, self.dropout, rng, training)
        x = self.norm(x)
        x, coeff = self.gat(x, self._src, self._dst, n)
        z = x[g:]
        # gene->pathway edges are the first half of the directed edge list
        m = self._n_members
        gp = (self._src[:m], self._dst[:m] - g, coeff.data[:m].mean(axis=1))
        weights, pooled = gate_pool(self.gate(z), z)
        return PathwayOutput(z, gp, weights, pooled)
