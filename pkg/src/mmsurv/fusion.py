"""Prototype-to-pathway cross attention, gated pooling and the survival head."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import autodiff as ad
from .layers import LayerNorm, Linear, Module, gate_pool

FUSION_VARIANTS = ("cross_attention", "concatenation", "bilinear", "gated")


class ConfigError(ValueError):
    pass


@dataclass
class FusionOutput:
    attention: ad.Tensor | None  # K x P, head mean
    attended_tokens: ad.Tensor | None  # K x d
    fusion_gate_weights: ad.Tensor | None  # K
    cross_embedding: ad.Tensor | None  # d
    fused: ad.Tensor  # d
    logits: ad.Tensor  # B


class CrossAttention(Module):
    """Tokens (K x d) query pathway embeddings (P x d), split over heads."""

    def __init__(self, rng, dim, heads):
        if dim % heads:
            raise ConfigError(f"dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(rng, dim, dim)
        self.k = Linear(rng, dim, dim)
        self.v = Linear(rng, dim, dim)
        self.out = Linear(rng, dim, dim)

    def __call__(self, tokens, pathways):
        if pathways.shape[0] == 0:
            raise ad.ContractError("cross attention needs at least one pathway")
        q, k, v = self.q(tokens), self.k(pathways), self.v(pathways)
        dh = q.shape[1] // self.heads
        scale = 1.0 / math.sqrt(dh)
        maps, outs = [], []
        for h in range(self.heads):
            cols = slice(h * dh, (h + 1) * dh)
            a = ad.softmax_last(ad.matmul(q[:, cols], ad.transpose(k[:, cols])) * scale)
            maps.append(a)
            outs.append(ad.matmul(a, v[:, cols]))
        attention = maps[0]
        for a in maps[1:]:
            attention = attention + a
        attention = attention * (1.0 / self.heads)
        return attention, self.out(ad.concat(outs, axis=-1))


class Bottleneck(Module):
    """Linear -> ReLU -> dropout -> Linear, all widths ``dim`` except the input."""

    def __init__(self, rng, n_in, dim, dropout):
        self.fc1 = Linear(rng, n_in, dim)
        self.fc2 = Linear(rng, dim, dim)
        self.dropout = dropout

    def __call__(self, x, rng=None, training=False):
        h = ad.dropout(ad.relu(self.fc1(x)), self.dropout, rng, training)
        return self.fc2(h)


def _row(x):
    return ad.reshape(x, (1, -1))


class FusionHead(Module):
    def __init__(self, rng, dim, n_bins, heads=2, dropout=0.25, variant="cross_attention"):
        if variant not in FUSION_VARIANTS:
            raise ConfigError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")
        self.variant = variant
        if variant == "cross_attention":
            self.cross = CrossAttention(rng, dim, heads)
            self.gate = Linear(rng, dim, 1, bias=False)
            self.norms = [LayerNorm(dim) for _ in range(3)]
            self.mlp = Bottleneck(rng, 3 * dim, dim, dropout)
        elif variant == "concatenation":
            self.norms = [LayerNorm(dim) for _ in range(2)]
            self.mlp = Bottleneck(rng, 2 * dim, dim, dropout)
        elif variant == "bilinear":
            # low-rank bilinear interaction (z_p U) * (z_w V), rank = dim
            self.left = Linear(rng, dim, dim, bias=False)
            self.right = Linear(rng, dim, dim, bias=False)
            self.mlp = Bottleneck(rng, dim, dim, dropout)
        else:
            self.gate_map = Linear(rng, dim, dim)
            self.norms = [LayerNorm(dim) for _ in range(2)]
            self.mlp = Bottleneck(rng, 2 * dim, dim, dropout)
        self.classifier = Linear(rng, dim, n_bins)

    def __call__(self, tokens, pathway_embeddings, z_pathway, z_wsi, rng=None, training=False):
        attention = attended = fgates = z_cross = None
        zp, zw = _row(z_pathway), _row(z_wsi)
        if self.variant == "cross_attention":
            attention, attended = self.cross(tokens, pathway_embeddings)
            fgates, z_cross = gate_pool(self.gate(attended), attended)
            streams = [norm(s) for norm, s in zip(self.norms, (zp, _row(z_cross), zw))]
            x = ad.concat(streams, axis=-1)
        elif self.variant == "concatenation":
            x = ad.concat([self.norms[0](zp), self.norms[1](zw)], axis=-1)
        elif self.variant == "bilinear":
            x = self.left(zp) * self.right(zw)
        else:
            g = ad.sigmoid(self.gate_map(zw))
            x = ad.concat([g * self.norms[0](zp), self.norms[1](zw)], axis=-1)
        fused = self.mlp(x, rng, training)
        logits = self.classifier(fused)
        return FusionOutput(
            attention=attention,
            attended_tokens=attended,
            fusion_gate_weights=fgates,
            cross_embedding=z_cross,
            fused=ad.reshape(fused, (-1,)),
            logits=ad.reshape(logits, (-1,)),
        )
