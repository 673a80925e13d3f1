"""The full multimodal survival model: prototype encoder, pathway encoder, fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .fusion import FusionHead, FusionOutput
from .gnn import PathwayEncoder, PathwayOutput
from .layers import Linear, Module
from .prototype import PrototypeEncoder, PrototypeOutput


@dataclass
class ForwardOutput:
    logits: ad.Tensor
    prototype: PrototypeOutput | None
    pathway: PathwayOutput | None
    fusion: FusionOutput | None
    training: bool


class SurvivalModel(Module):
    """Builds only the encoders the configured branch needs.

    Unimodal branches replace the fusion head with a fresh linear map d -> B.
    """

    def __init__(self, config: TrainConfig, graph, in_dim, init_centroids=None, rng=None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        self.config = config
        self.in_dim = in_dim
        self.wsi = self.genes = self.fusion = self.head = None
        if config.branches in ("both", "wsi_only"):
            self.wsi = PrototypeEncoder(rng, in_dim, config.d, config.K, config.tau, init_centroids)
        if config.branches in ("both", "gene_only"):
            self.genes = PathwayEncoder(
                rng, graph, config.d, config.heads_gene, config.dropout, sage_layers=config.gnn_layers - 1
            )
        if config.branches == "both":
            self.fusion = FusionHead(rng, config.d, config.B, config.heads_fusion, config.dropout, config.fusion_variant)
        else:
            self.head = Linear(rng, config.d, config.B)

    def __call__(self, features=None, expression=None, rng=None, training=False):
        proto = self.wsi(features) if self.wsi is not None else None
        path = self.genes(expression, rng, training) if self.genes is not None else None
        fused = None
        if self.fusion is not None:
            fused = self.fusion(
                proto.tokens, path.pathway_embeddings, path.pathway_embedding_pooled, proto.wsi_embedding, rng, training
            )
            logits = fused.logits
        else:
            z = proto.wsi_embedding if proto is not None else path.pathway_embedding_pooled
            logits = ad.reshape(self.head(ad.reshape(z, (1, -1))), (-1,))
        return ForwardOutput(logits, proto, path, fused, training)

    def state(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state(self, state):
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) ^ set(state))
            raise ValueError(f"state does not match model parameters: {missing[:5]}")
        for name, p in params.items():
            if p.data.shape != state[name].shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.data.shape}")
            p.data = np.array(state[name], dtype=np.float64)
