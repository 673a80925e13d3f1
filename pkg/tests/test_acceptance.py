"""Acceptance suite: one verdict line per criterion.

Run ``pytest tests/test_acceptance.py -s`` to see the lines as they are
produced; they are also repeated in the terminal summary.  The real Reactome
check runs only when ``MMSURV_REACTOME_DIR`` points at the release files.
"""

import itertools
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import minireactome as mini
from acceptance_log import LINES, verdict
from gradcheck import analytic_grad, numeric_grad, op_cases, rel_error
from modelcheck import model_grad_error, tiny_setup
from mmsurv import autodiff as ad
from mmsurv import cli
from mmsurv.analysis import mean_interval, null_signal_cindex, overfit_experiment, planted_signal_replicate
from mmsurv.config import TrainConfig
from mmsurv.curation import CurationConfig, GeneSet, build_bipartite, curate_base, curate_graph, parse_gene_list
from mmsurv.interpret import extract_signals, single_gene_heatmap, single_pathway_heatmap
from mmsurv.model import SurvivalModel
from mmsurv.prototype import PatchBag
from mmsurv.stats import (
    FoldSignals,
    bh_fdr,
    fold_stratified_analysis,
    mann_whitney,
    normal_quantile,
    rank_biserial,
    stouffer_combine,
)
from mmsurv.survival import c_index, nll_loss, risk_score, survival_curve


# 1 gradients


def test_gradient_suite():
    start = time.perf_counter()
    worst = {}
    for name, build, arrays in op_cases():
        grads = analytic_grad(build, arrays)
        num = [numeric_grad(lambda *xs: build(*[ad.Tensor(x) for x in xs]).item(), arrays, i) for i in range(len(arrays))]
        worst[name] = max(rel_error(g, n) for g, n in zip(grads, num))
    for variant in ("cross_attention", "concatenation", "bilinear", "gated"):
        worst[f"model/{variant}"] = max(model_grad_error(*tiny_setup(0, variant)).values())
    for branches in ("wsi_only", "gene_only"):
        worst[f"model/{branches}"] = max(model_grad_error(*tiny_setup(0, "cross_attention", branches)).values())
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    ok = worst[top] <= 1e-4 and elapsed < 30
    verdict(1, "gradient suite", ok, f"{len(worst)} checks, worst {top}={worst[top]:.1e} (<=1e-4), {elapsed:.1f}s (<30s)")


# 2 normalisation


def random_instance(seed):
    rng = np.random.default_rng(seed)
    pool = [f"G{i}" for i in range(int(rng.integers(2, 12)))]
    sets = []
    for p in range(int(rng.integers(1, 7))):
        size = int(rng.integers(1, len(pool) + 1))
        sets.append(GeneSet(f"P{p}", f"p{p}", "custom", frozenset(rng.choice(pool, size, replace=False).tolist())))
    graph = build_bipartite(sets)
    heads = int(rng.integers(1, 3))
    cfg = TrainConfig(d=4 * heads, K=int(rng.integers(1, 6)), heads_fusion=heads, heads_gene=int(rng.integers(1, 3)),
                      gnn_layers=int(rng.integers(2, 4)), B=int(rng.integers(1, 6)), seed=seed)
    in_dim, n = int(rng.integers(1, 6)), int(rng.integers(1, 25))
    model = SurvivalModel(cfg, graph, in_dim)
    scale = 10.0 ** rng.uniform(-2, 2)
    bag = PatchBag("pt", rng.normal(size=(n, in_dim)) * scale, rng.integers(0, 9, (n, 2)) * 256.0, ["s"] * n)
    out = model(bag.features, rng.normal(size=graph.G) * scale, training=False)
    return extract_signals(out, graph, bag)


def test_normalisation_suite():
    worst = {}
    for seed in range(100):
        for key, err in random_instance(seed).simplex_errors().items():
            worst[key] = max(worst.get(key, 0.0), err)
    top = max(worst, key=worst.get)
    expected = {"alpha", "wsi_gate", "pathway_gate", "gene_pathway_attention", "cross_attention", "fusion_gate"}
    ok = set(worst) == expected and worst[top] <= 1e-10
    verdict(2, "normalisation suite", ok, f"100 instances, {len(worst)} simplex kinds, worst {top}={worst[top]:.1e} (<=1e-10)")


# 3 survival


def pairwise_cindex(risks, times, events):
    num = den = 0.0
    for i, j in itertools.permutations(range(len(risks)), 2):
        if times[i] < times[j] and events[i] == 1:
            den += 1
            num += 1.0 if risks[i] > risks[j] else 0.5 if risks[i] == risks[j] else 0.0
    return num / den if den else None


def brute_force_nll(logits, b, event):
    hazards = [1.0 / (1.0 + math.exp(-h)) for h in logits]
    prob = hazards[b] if event else 1.0 - hazards[b]
    for j in range(b):
        prob *= 1.0 - hazards[j]
    return -math.log(prob)


def test_survival_oracle():
    rng = np.random.default_rng(2024)
    cohorts = mismatched = 0
    while cohorts < 50:
        n = int(rng.integers(2, 201))
        times = rng.integers(1, 40, n).astype(float)
        events = rng.integers(0, 2, n)
        risks = np.round(rng.normal(size=n), 1)
        ref = pairwise_cindex(risks, times, events)
        if ref is None:
            continue
        cohorts += 1
        mismatched += c_index(risks, times, events) != ref
    nll_err = 0.0
    for _ in range(500):
        bins = int(rng.integers(1, 9))
        logits = rng.uniform(-6, 6, bins)
        b, event = int(rng.integers(0, bins)), int(rng.integers(0, 2))
        got = nll_loss(ad.Tensor(logits), b, event).item()
        nll_err = max(nll_err, abs(got - brute_force_nll(logits, b, event)))
    surv = survival_curve(rng.normal(size=(1000, 4)) * 10)
    monotone = bool(np.all(np.diff(surv, axis=1) <= 0))
    canon = survival_curve(np.zeros(4))
    canonical = canon.tolist() == [0.5, 0.25, 0.125, 0.0625] and float(risk_score(canon)) == -0.9375
    ok = mismatched == 0 and nll_err <= 1e-10 and monotone and canonical
    verdict(3, "survival oracle", ok, f"C-index exact on {cohorts - mismatched}/50 cohorts, NLL err {nll_err:.1e} (<=1e-10), "
            f"S monotone on 1000 logit vectors={monotone}, canonical exact={canonical}")


# 4 statistics


def enumerate_exact_p(low, high):
    pooled = list(low) + list(high)
    mu = len(low) * len(high) / 2

    def u_of(lo, hi):
        return sum((a > b) + 0.5 * (a == b) for a in lo for b in hi)

    observed = abs(u_of(low, high) - mu)
    hits = total = 0
    for idx in itertools.combinations(range(len(pooled)), len(low)):
        rest = [pooled[i] for i in range(len(pooled)) if i not in idx]
        total += 1
        hits += abs(u_of([pooled[i] for i in idx], rest) - mu) >= observed - 1e-12
    return hits / total


def test_statistics_oracle():
    rng = np.random.default_rng(12)
    mwu_err = 0.0
    for _ in range(60):
        n_low = int(rng.integers(1, 7))
        n_high = int(rng.integers(1, 13 - n_low))
        low, high = rng.integers(0, 6, n_low).astype(float), rng.integers(0, 6, n_high).astype(float)
        mwu_err = max(mwu_err, abs(mann_whitney(low, high, mode="exact")[1] - enumerate_exact_p(low, high)))
    u, p = mann_whitney([1, 2, 3], [4, 5, 6], mode="exact")
    worked = u == 0.0 and abs(p - 0.1) <= 1e-12 and rank_biserial(u, 3, 3) == 1.0
    stouffer_err = 0.0
    for p_fold, folds in itertools.product([1e-6, 0.003, 0.05, 0.4, 0.9], range(2, 11)):
        z, _, _ = stouffer_combine([p_fold] * folds, [0.2] * folds, [30] * folds)
        stouffer_err = max(stouffer_err, abs(z - normal_quantile(1 - p_fold / 2) * math.sqrt(folds)))
    q, _ = bh_fdr([0.01, 0.02, 0.03, 0.04])
    bh_ok = np.allclose(q, 0.04, rtol=0, atol=1e-15)
    folds = [FoldSignals(f, rng.normal(size=(16, 5)), rng.normal(size=16), [f"E{j}" for j in range(5)]) for f in range(3)]
    moved = [FoldSignals(f.fold, np.exp(f.values), f.risks, f.entities) for f in folds]
    a, b = fold_stratified_analysis(folds, "gene_importance"), fold_stratified_analysis(moved, "gene_importance")
    invariant = a.per_fold == b.per_fold and [(m.z, m.p, m.q) for m in a.meta] == [(m.z, m.p, m.q) for m in b.meta]
    ok = mwu_err <= 1e-12 and worked and stouffer_err <= 1e-12 and bh_ok and invariant
    verdict(4, "statistics oracle", ok, f"exact MWU err {mwu_err:.1e} (<=1e-12), worked example={worked}, "
            f"Stouffer identity err {stouffer_err:.1e} (<=1e-12), BH q={np.round(q, 12).tolist()}, exp() invariance={invariant}")


# 5 curation


REACTOME_FILES = {
    "gmt": "ReactomePathways.gmt",
    "relations": "ReactomePathwaysRelation.txt",
    "names": "ReactomePathways.txt",
    "genes": "genes.txt",
}


def real_reactome_counts(root):
    hallmark = sorted(root.glob("h.all*.gmt"))
    names = dict(ln.split("\t")[:2] for ln in (root / REACTOME_FILES["names"]).read_text().splitlines() if "\t" in ln)
    base, manifest = curate_base(
        (root / REACTOME_FILES["gmt"]).read_text(), (root / REACTOME_FILES["relations"]).read_text(),
        hallmark[0].read_text() if hallmark else "", CurationConfig(), names,
    )
    _, graph, _ = curate_graph(base, parse_gene_list((root / REACTOME_FILES["genes"]).read_text()))
    c = manifest.stage_counts
    return [c["depth_selected"], c["category_excluded"], c["size_filtered"], c["hallmark_merged"], graph.P], graph.G, len(graph.memberships)


def test_curation_mini_hierarchy():
    cfg = CurationConfig(**mini.CONFIG)
    base, manifest = curate_base(mini.REACTOME_GMT, mini.RELATIONS, mini.HALLMARK_GMT, cfg)
    _, graph, _ = curate_graph(base, mini.MEASURED, cfg)
    checks = {
        "stage counts": manifest.stage_counts == mini.EXPECTED_COUNTS,
        "base ids": [s.id for s in base] == mini.EXPECTED_BASE,
        "pathways": graph.pathways == mini.EXPECTED_PATHWAYS,
        "genes": graph.genes == mini.EXPECTED_GENES,
        "memberships": len(graph.memberships) == mini.EXPECTED_MEMBERSHIPS,
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(5, "curation oracle (mini hierarchy)", not failed, "all hand-enumerated outputs reproduced" if not failed else f"mismatch in {failed}")


def test_curation_real_reactome():
    root = os.environ.get("MMSURV_REACTOME_DIR")
    if not root or not all((Path(root) / f).exists() for f in REACTOME_FILES.values()):
        line = "[SKIP] criterion  5 curation oracle (real Reactome v83): set MMSURV_REACTOME_DIR to run"
        LINES.append(line)
        print(line)
        pytest.skip("real Reactome release files not available")
    stages, genes, edges = real_reactome_counts(Path(root))
    ok = stages == [2769, 666, 634, 684, 662] and genes == 4574 and edges == 17275
    verdict(5, "curation oracle (real Reactome v83)", ok, f"stages {stages}, {genes} genes, {edges} edges")


# 6 overfit


def test_end_to_end_overfit():
    cindex, epochs, seconds = overfit_experiment()
    ok = cindex >= 0.95 and epochs <= 200 and seconds < 120
    verdict(6, "end-to-end overfit", ok, f"training C-index {cindex:.4f} (>=0.95) after {epochs} epochs (<=200) in {seconds:.1f}s (<120s)")


# 7 planted signal


def test_planted_signal_recovery():
    ranks = [planted_signal_replicate(seed)[0] for seed in range(5)]
    hits = sum(r <= 5 for r in ranks)
    null = [null_signal_cindex(seed) for seed in range(10)]
    lo, hi = mean_interval(null)
    ok = hits >= 4 and lo <= 0.5 <= hi
    verdict(7, "planted-signal recovery", ok, f"planted pathway ranks {ranks} ({hits}/5 in top 5, need >=4); "
            f"null C-index 95% interval ({lo:.3f}, {hi:.3f}) must contain 0.5")


# 8 determinism


DETERMINISM_CONFIG = "d = 8\nK = 2\nmax_epochs = 3\nn_folds = 2\nkmeans_restarts = 2\nlr = 0.002\nseed = 42\n"


def test_determinism(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--patients", "24", "--seed", "3"]) == 0
    (tmp_path / "cfg.txt").write_text(DETERMINISM_CONFIG)
    files = {}
    for run in ("a", "b"):
        rd = tmp_path / run
        assert cli.main(["train", "--data", str(data), "--config", str(tmp_path / "cfg.txt"), "--out", str(rd / "run")]) == 0
        assert cli.main(["interpret", "--data", str(data), "--run", str(rd / "run"), "--pathway", "SYN_P000",
                         "--gene", "G0001", "--out", str(rd / "interp")]) == 0
        risks = sorted((rd / "run").glob("val_risks_fold*.csv"))
        overlays = sorted((rd / "interp" / "overlays").glob("*"))
        files[run] = {p.relative_to(rd).as_posix(): p.read_bytes() for p in risks + overlays}
    same = files["a"].keys() == files["b"].keys() and all(files["a"][k] == files["b"][k] for k in files["a"])
    n_risk = sum("val_risks" in k for k in files["a"])
    verdict(8, "determinism", same and n_risk == 2, f"{n_risk} validation risk CSVs and {len(files['a']) - n_risk} overlay files bit-identical={same}")


# 9 interpretability composition


def test_interpretability_composition():
    # E is the only member of P3, so its attention into P3 is exactly 1
    sets = [
        GeneSet("P1", "p1", "custom", frozenset("ABC")),
        GeneSet("P2", "p2", "custom", frozenset("CD")),
        GeneSet("P3", "p3", "custom", frozenset("E")),
    ]
    graph = build_bipartite(sets)
    exact, matvec_err = True, 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        model = SurvivalModel(TrainConfig(d=8, K=3, seed=seed), graph, in_dim=4)
        n = int(rng.integers(1, 30))
        bag = PatchBag("pt", rng.normal(size=(n, 4)), rng.integers(0, 9, (n, 2)) * 256.0, ["s"] * n)
        b = extract_signals(model(bag.features, rng.normal(size=graph.G), training=False), graph, bag)
        gene, path = single_gene_heatmap(b, "E"), single_pathway_heatmap(b, "P3")
        exact &= [(r.raw_value, r.rank_value) for r in gene] == [(r.raw_value, r.rank_value) for r in path]
        matvec_err = max(matvec_err, float(np.abs(b.gene_importance_sum - b.dense_gene_attention() @ b.pathway_gate).max()))
    ok = exact and matvec_err <= 1e-12
    verdict(9, "interpretability composition", ok, f"single-gene == single-pathway heatmap exactly={exact}, "
            f"importance matvec err {matvec_err:.1e} (<=1e-12)")


# 10 ablation harness


ABLATION_CONFIG = "d = 8\nmax_epochs = 2\nn_folds = 2\nkmeans_restarts = 1\nlr = 0.002\nseed = 42\n"


def test_ablation_harness(tmp_path):
    data = tmp_path / "data"
    assert cli.main(["synth", "--out", str(data), "--patients", "30", "--seed", "5"]) == 0
    (tmp_path / "cfg.txt").write_text(ABLATION_CONFIG)
    tables = {}
    for variant in ("fusion", "K"):
        rc = cli.main(["ablate", "--data", str(data), "--config", str(tmp_path / "cfg.txt"), "--variant", variant, "--out", str(tmp_path)])
        assert rc == 0
        tables[variant] = (tmp_path / f"ablation_{variant}.csv").read_text().splitlines()
    fusion, ks = tables["fusion"], tables["K"]
    same_header = fusion[0] == ks[0]
    variants = [row.split(",")[1] for row in fusion[1:]]
    k_values = [row.split(",")[3] for row in ks[1:]]
    finite = all(math.isfinite(float(x)) for t in (fusion, ks) for row in t[1:] for x in row.split(",")[5:])
    ok = same_header and variants == ["cross_attention", "concatenation", "bilinear", "gated"] and k_values == ["4", "8", "16"] and finite
    verdict(10, "ablation harness", ok, f"fusion variants {variants}, K values {k_values}, shared header={same_header}, finite scores={finite}")
