"""Full-model finite-difference check at a tiny size, shared by unit and acceptance tests."""

import numpy as np

from gradcheck import rel_error
from mmsurv import autodiff as ad
from mmsurv.config import TrainConfig
from mmsurv.curation import GeneSet, build_bipartite
from mmsurv.model import SurvivalModel
from mmsurv.survival import nll_loss

TINY_SETS = [
    GeneSet("P1", "p1", "custom", frozenset({"A", "B", "C"})),
    GeneSet("P2", "p2", "custom", frozenset({"C", "D", "E"})),
    GeneSet("P3", "p3", "custom", frozenset({"E", "F", "A"})),
]


def tiny_setup(seed=0, variant="cross_attention", branches="both"):
    """K=2, P=3, G=6, d=4, B=2 with every parameter redrawn from N(0, 1)."""
    graph = build_bipartite(TINY_SETS)
    cfg = TrainConfig(d=4, K=2, B=2, dropout=0.0, fusion_variant=variant, branches=branches, seed=seed)
    model = SurvivalModel(cfg, graph, in_dim=3)
    rng = np.random.default_rng(seed + 100)
    for _, p in model.named_parameters():
        p.data = rng.standard_normal(p.data.shape)
    feats = rng.standard_normal((5, 3))
    expr = rng.standard_normal(graph.G)
    return model, feats, expr


def model_grad_error(model, feats, expr, bin_idx=1, event=1, h=1e-5):
    """Worst relative error between tape and central-difference gradients over all parameters."""

    def loss_value():
        return nll_loss(model(feats, expr).logits, bin_idx, event).item()

    params = model.named_parameters()
    named = list(params)
    with ad.Tape() as tape:
        loss = nll_loss(model(feats, expr).logits, bin_idx, event)
    grads = ad.backward(tape, loss, [p for _, p in named])
    worst = {}
    for (name, p), g in zip(named, grads):
        num = np.zeros_like(p.data)
        for pos in np.ndindex(p.data.shape):
            orig = p.data[pos]
            p.data[pos] = orig + h
            up = loss_value()
            p.data[pos] = orig - h
            down = loss_value()
            p.data[pos] = orig
            num[pos] = (up - down) / (2 * h)
        worst[name] = rel_error(g, num)
    return worst
