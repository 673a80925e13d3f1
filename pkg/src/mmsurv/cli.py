"""Command-line pipeline: preprocess, synth, train, evaluate, interpret, stats, ablate.

Exit codes: 0 success, 1 internal error, 2 input error.  Failures print one
JSON object on stderr.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import curation as cur
from . import formats as fmt
from .analysis import fold_bundles, signals_for
from .autodiff import ContractError
from .config import TrainConfig, format_config, load_config
from .fusion import ConfigError
from .interpret import (
    extract_exemplars,
    overlay_csv,
    overlay_meta,
    pathway_overlay,
    prototype_overlay,
    signal_dump,
    single_gene_heatmap,
    single_pathway_heatmap,
)
from .stats import PROTOTYPE_KINDS, fold_stratified_analysis, prototype_row_tests
from .survival import MetricError, c_index, km_curve, logrank_test, median_risk_split
from .synthetic import Cohort, SpecError, SyntheticCohortSpec, generate_synthetic_cohort
from .training import (
    FUSION_GRID,
    K_GRID,
    Checkpoint,
    FoldResult,
    FoldSplit,
    grid_csv,
    history_csv,
    make_folds,
    predict,
    restore_model,
    risk_csv,
    run_fold,
    run_grid,
)

log = logging.getLogger("mmsurv")


class InputError(Exception):
    """Bad user input: missing files, malformed data, unmet dependencies."""


INPUT_ERRORS = (
    InputError,
    FileNotFoundError,
    fmt.FormatError,
    cur.ParseError,
    cur.StructureError,
    cur.InputError,
    ConfigError,
    SpecError,
    ContractError,
    MetricError,
)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _versions():
    import scipy
    import sklearn

    return {"mmsurv": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "sklearn": sklearn.__version__}


def _read_text(path):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"missing input file: {path}")
    return path.read_text(encoding="utf-8")


def _write(path, content, manifest=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = content.encode("utf-8") if isinstance(content, str) else content
    path.write_bytes(data)
    if manifest is not None:
        manifest.outputs[str(path)] = fmt.sha256_bytes(data)


def _finish(manifest, path):
    manifest.finished = _now()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(manifest.to_json(), encoding="utf-8")


def _manifest(command, config=None, seeds=None):
    return fmt.RunManifest(command=command, config=config or {}, seeds=seeds or {}, versions=_versions(), started=_now())


# dataset directory


DATA_FILES = ("pathways.gmt", "expression.csv", "survival.csv", "slides.csv")


def data_digests(data_dir):
    data_dir = Path(data_dir)
    out = {}
    for name in DATA_FILES:
        p = data_dir / name
        if not p.is_file():
            raise InputError(f"dataset is missing {p}")
        out[name] = fmt.sha256_file(p)
    for _, _, rel in fmt.slides_from_csv((data_dir / "slides.csv").read_text(encoding="utf-8")):
        out[rel] = fmt.sha256_file(data_dir / rel)
    return out


def load_dataset(data_dir, warnings=None):
    data_dir = Path(data_dir)
    sets = cur.parse_gmt(_read_text(data_dir / "pathways.gmt"))
    graph = cur.build_bipartite(sets)
    expression = fmt.expression_from_csv(_read_text(data_dir / "expression.csv"), graph.genes, warnings)
    records = fmt.survival_from_csv(_read_text(data_dir / "survival.csv"))
    slides = {}
    for pid, sid, rel in fmt.slides_from_csv(_read_text(data_dir / "slides.csv")):
        path = data_dir / rel
        if not path.is_file():
            raise InputError(f"missing patch file {path}")
        slides.setdefault(pid, []).append(fmt.load_patch_file(path, pid, sid))
    from .prototype import concat_bags

    bags = {pid: concat_bags(b) for pid, b in slides.items()}
    missing = sorted(p for p in records if p not in expression or p not in bags)
    if missing:
        raise InputError(f"{len(missing)} patients lack expression or slides: {missing[:10]}")
    return Cohort(graph, bags, {p: expression[p] for p in records}, records)


def write_dataset(cohort, out_dir, sets, manifest=None, binary=True):
    out_dir = Path(out_dir)
    _write(out_dir / "pathways.gmt", cur.write_gmt(sets), manifest)
    _write(out_dir / "gene_pathway_edges.csv", cur.write_edge_csv(cohort.graph), manifest)
    _write(out_dir / "expression.csv", fmt.expression_to_csv(cohort.expression, cohort.graph.genes), manifest)
    _write(out_dir / "survival.csv", fmt.survival_to_csv(cohort.records), manifest)
    rows = ["patient_id,slide_id,path"]
    for pid in cohort.patient_ids:
        bag = cohort.bags[pid]
        rel = f"patches/{bag.slide_ids[0]}" + (".bin" if binary else ".csv")
        data = fmt.patches_to_bytes(bag.features, bag.coords) if binary else fmt.patches_to_csv(bag.features, bag.coords)
        _write(out_dir / rel, data, manifest)
        rows.append(f"{pid},{bag.slide_ids[0]},{rel}")
    _write(out_dir / "slides.csv", "\n".join(rows) + "\n", manifest)


# run directory guards


def _load_run_manifest(run_dir):
    path = Path(run_dir) / "manifest.json"
    if not path.is_file():
        raise InputError(f"{run_dir} has no training manifest; run `train` first")
    return fmt.RunManifest.from_json(path.read_text(encoding="utf-8"))


def _check_digests(run_manifest, data_dir):
    current = data_digests(data_dir)
    recorded = run_manifest.inputs
    drift = sorted(k for k in set(current) | set(recorded) if current.get(k) != recorded.get(k))
    if drift:
        raise InputError(f"input digests differ from the training manifest: {drift[:10]}")


def _folds_for(run_dir):
    data = json.loads(_read_text(Path(run_dir) / "folds.json"))
    return [FoldSplit(f["fold"], tuple(f["train"]), tuple(f["val"])) for f in data]


def _selected(folds, which):
    if which in (None, "all"):
        return folds
    f = int(which)
    picked = [s for s in folds if s.fold == f]
    if not picked:
        raise InputError(f"no fold {f}")
    return picked


def _checkpoint(run_dir, fold):
    path = Path(run_dir) / f"fold{fold}.ckpt"
    if not path.is_file():
        raise InputError(f"missing checkpoint {path}; run `train` first")
    return Checkpoint.load(path)


def _fold_result(run_dir, split, cohort):
    ckpt = _checkpoint(run_dir, split.fold)
    model = restore_model(ckpt, cohort)
    logits, risks = predict(model, cohort, split.val_ids)
    return FoldResult(ckpt, split.val_ids, risks, logits, [])


# commands


def cmd_preprocess_reactome(args):
    config = cur.CurationConfig(
        target_depth=args.depth, min_genes=args.min_genes, max_genes=args.max_genes, jaccard_threshold=args.jaccard
    )
    names = None
    if args.names:
        names = dict(
            ln.split("\t")[:2] for ln in _read_text(args.names).splitlines() if ln.count("\t") >= 1
        )
    hallmark = _read_text(args.hallmark) if args.hallmark else ""
    sets, cman = cur.curate_base(_read_text(args.gmt), _read_text(args.relations), hallmark, config, names)
    man = _manifest("preprocess reactome", cman.config)
    man.inputs = {p: fmt.sha256_file(p) for p in (args.gmt, args.relations, args.hallmark, args.names) if p}
    man.warnings = cman.warnings
    out = Path(args.out)
    _write(out / f"{config.base_filename()}.gmt", cur.write_gmt(sets), man)
    _write(out / f"{config.base_filename()}.stats.json", json.dumps(cman.to_dict(), indent=2, sort_keys=True) + "\n", man)
    _finish(man, out / "manifest.json")
    print(json.dumps(cman.stage_counts))


def cmd_preprocess_genes(args):
    base = cur.parse_gmt(_read_text(args.pathways))
    text = _read_text(args.expression)
    measured = fmt.read_expression_header(text)
    config = cur.CurationConfig(min_coverage_genes=args.min_coverage)
    sets, graph, cman = cur.curate_graph(base, measured, config)
    man = _manifest("preprocess genes", cman.config)
    man.inputs = {p: fmt.sha256_file(p) for p in (args.pathways, args.expression)}
    out = Path(args.out)
    _write(out / "pathways.gmt", cur.write_gmt(sets), man)
    _write(out / "gene_pathway_edges.csv", cur.write_edge_csv(graph), man)
    _write(out / "graph.stats.json", json.dumps(cman.to_dict(), indent=2, sort_keys=True) + "\n", man)
    _finish(man, out / "manifest.json")
    print(json.dumps(cman.graph_stats))


def cmd_synth(args):
    spec = SyntheticCohortSpec(
        n_patients=args.patients,
        signal_strength=args.signal,
        censoring_rate=args.censoring,
        seed=args.seed,
    )
    cohort = generate_synthetic_cohort(spec)
    sets = [cur.GeneSet(p, p, "custom", frozenset(cohort.graph.pathway_genes(p))) for p in cohort.graph.pathways]
    spec_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(spec).items()}
    man = _manifest("synth", spec_dict, {"seed": args.seed})
    out = Path(args.out)
    write_dataset(cohort, out, sets, man, binary=not args.csv)
    truth = {
        "planted_pathway": cohort.truth["planted_pathway"],
        "risk": cohort.truth["risk"],
        "cluster_labels": {p: v.tolist() for p, v in cohort.truth["cluster_labels"].items()},
    }
    _write(out / "truth.json", json.dumps(truth, indent=2, sort_keys=True) + "\n", man)
    _finish(man, out / "manifest.json")


def _config(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_train(args):
    cfg = _config(args)
    man = _manifest("train", cfg.to_dict(), {"seed": cfg.seed})
    man.inputs = data_digests(args.data)
    cohort = load_dataset(args.data, man.warnings)
    folds = make_folds(cohort.patient_ids, cfg.n_folds, cfg.seed)
    out = Path(args.out)
    _write(out / "config.txt", format_config(cfg), man)
    _write(
        out / "folds.json",
        json.dumps([{"fold": s.fold, "train": list(s.train_ids), "val": list(s.val_ids)} for s in folds], indent=1) + "\n",
        man,
    )
    history = []
    cache = {}
    for split in _selected(folds, args.fold):
        res = run_fold(cfg, split, cohort, cache)
        history.extend(res.history)
        _write(out / f"fold{split.fold}.ckpt", res.checkpoint.to_bytes(), man)
        _write(out / f"val_risks_fold{split.fold}.csv", risk_csv(res.val_ids, res.val_risks, res.val_logits), man)
    _write(out / "results.csv", history_csv(history), man)
    _finish(man, out / "manifest.json")


def cmd_evaluate(args):
    run = _load_run_manifest(args.run)
    _check_digests(run, args.data)
    cohort = load_dataset(args.data)
    folds = [s for s in _selected(_folds_for(args.run), args.fold) if (Path(args.run) / f"fold{s.fold}.ckpt").is_file()]
    if not folds:
        raise InputError("no trained folds found; run `train` first")
    man = _manifest("evaluate", run.config, run.seeds)
    man.inputs = run.inputs
    out = Path(args.out or Path(args.run) / "eval")
    summary = {"folds": {}}
    ids, risks = [], []
    for split in folds:
        res = _fold_result(args.run, split, cohort)
        _write(out / f"risks_fold{split.fold}.csv", risk_csv(res.val_ids, res.val_risks, res.val_logits), man)
        ci = c_index(res.val_risks, [cohort.records[p].time for p in res.val_ids], [cohort.records[p].event for p in res.val_ids])
        summary["folds"][str(split.fold)] = {"cindex": ci, "stored_best_cindex": res.checkpoint.best_cindex}
        ids.extend(res.val_ids)
        risks.extend(res.val_risks)
    times = np.array([cohort.records[p].time for p in ids])
    events = np.array([cohort.records[p].event for p in ids])
    high = median_risk_split(risks)
    groups = {}
    for label, mask in (("low", ~high), ("high", high)):
        et, s = km_curve(times[mask], events[mask])
        groups[label] = {"times": et.tolist(), "survival": s.tolist(), "n": int(mask.sum())}
    summary["km"] = groups
    try:
        stat, p = logrank_test(times, events, high.astype(int))
        summary["logrank"] = {"statistic": stat, "p": p}
    except ValueError as exc:
        summary["logrank"] = {"error": str(exc)}
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n", man)
    _finish(man, out / "manifest.json")
    print(json.dumps({k: v["cindex"] for k, v in summary["folds"].items()}))


def cmd_interpret(args):
    run = _load_run_manifest(args.run)
    _check_digests(run, args.data)
    cohort = load_dataset(args.data)
    split = _selected(_folds_for(args.run), args.fold if args.fold not in (None, "all") else 0)[0]
    res = _fold_result(args.run, split, cohort)
    if res.checkpoint.config.branches != "both" or res.checkpoint.config.fusion_variant != "cross_attention":
        raise InputError("interpretation needs the full cross-attention model")
    fb = fold_bundles(res, cohort)
    man = _manifest("interpret", run.config, run.seeds)
    man.inputs = run.inputs
    out = Path(args.out or Path(args.run) / f"interpret_fold{split.fold}")
    attn = np.stack([b.cross_attention for b in fb.bundles])
    row_stats = prototype_row_tests(attn, fb.risks, fb.bundles[0].pathways, split.fold)
    high = median_risk_split(fb.risks)
    for b, is_high in zip(fb.bundles, high):
        pid = b.patient_id
        _write(out / "signals" / f"{pid}.json", json.dumps(signal_dump(b), sort_keys=True) + "\n", man)
        _write(out / "overlays" / f"{pid}.prototype.csv", overlay_csv(prototype_overlay(b)), man)
        _write(out / "overlays" / f"{pid}.pathway.csv", overlay_csv(pathway_overlay(b, row_stats, bool(is_high))), man)
        if args.pathway:
            _write(out / "overlays" / f"{pid}.pathway_{args.pathway}.csv", overlay_csv(single_pathway_heatmap(b, args.pathway)), man)
        if args.gene:
            _write(out / "overlays" / f"{pid}.gene_{args.gene}.csv", overlay_csv(single_gene_heatmap(b, args.gene)), man)
    _write(out / "overlays" / "meta.json", overlay_meta("overlays", args.downsample, fold=split.fold), man)
    ex = extract_exemplars(fb.bundles, args.exemplars)
    _write(out / "exemplars.json", json.dumps({str(k): v for k, v in ex.items()}, indent=1) + "\n", man)
    _finish(man, out / "manifest.json")


def cmd_stats(args):
    kind = args.entity_kind
    if args.combine and kind in PROTOTYPE_KINDS:
        raise ContractError(f"{kind}: prototype identities differ across folds and cannot be combined")
    run = _load_run_manifest(args.run)
    _check_digests(run, args.data)
    cohort = load_dataset(args.data)
    folds = [s for s in _folds_for(args.run) if (Path(args.run) / f"fold{s.fold}.ckpt").is_file()]
    if not folds:
        raise InputError("no trained folds found; run `train` first")
    fbs = [fold_bundles(_fold_result(args.run, s, cohort), cohort) for s in folds]
    if kind == "within_pathway_genes" and not args.pathway:
        raise InputError("within_pathway_genes needs --pathway")
    if kind == "cross_attention_row" and args.prototype is None:
        raise InputError("cross_attention_row needs --prototype")
    signals = signals_for(fbs, kind, args.pathway, args.prototype)
    result = fold_stratified_analysis(signals, kind, combine=True if args.combine else None, alpha=args.alpha, mode=args.mode)
    man = _manifest("stats", run.config, run.seeds)
    man.inputs = run.inputs
    tag = kind + (f"_{args.pathway}" if args.pathway else "") + (f"_{args.prototype}" if args.prototype is not None else "")
    out = Path(args.out or Path(args.run) / "stats")
    _write(out / f"{tag}.per_fold.csv", fmt.fold_stats_csv(result.per_fold), man)
    if result.meta is not None:
        _write(out / f"{tag}.meta.csv", fmt.meta_stats_csv(result.meta), man)
    man.warnings = [f"fold {f} excluded: a risk group has fewer than two patients" for f in result.excluded_folds]
    _finish(man, out / f"{tag}.manifest.json")


def cmd_ablate(args):
    cfg = _config(args)
    cohort = load_dataset(args.data)
    grid = {"fusion": FUSION_GRID, "K": K_GRID}[args.variant]
    man = _manifest("ablate", cfg.to_dict(), {"seed": cfg.seed})
    man.inputs = data_digests(args.data)
    rows = run_grid(cfg, grid, cohort)
    _write(Path(args.out) / f"ablation_{args.variant}.csv", grid_csv(rows), man)
    _finish(man, Path(args.out) / f"ablation_{args.variant}.manifest.json")


def build_parser():
    p = argparse.ArgumentParser(prog="mmsurv", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    pre = sub.add_parser("preprocess", help="curate pathways and build the gene graph")
    psub = pre.add_subparsers(dest="stage", required=True)
    r = psub.add_parser("reactome")
    r.add_argument("--gmt", required=True)
    r.add_argument("--relations", required=True)
    r.add_argument("--hallmark")
    r.add_argument("--names", help="tab-separated id, name file for hierarchy nodes")
    r.add_argument("--depth", type=int, default=5)
    r.add_argument("--min-genes", type=int, default=3)
    r.add_argument("--max-genes", type=int, default=200)
    r.add_argument("--jaccard", type=float, default=1.0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_preprocess_reactome)
    g = psub.add_parser("genes")
    g.add_argument("--pathways", required=True)
    g.add_argument("--expression", required=True)
    g.add_argument("--min-coverage", type=int, default=2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_preprocess_genes)

    s = sub.add_parser("synth", help="write a synthetic cohort dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--patients", type=int, default=60)
    s.add_argument("--signal", type=float, default=2.0)
    s.add_argument("--censoring", type=float, default=0.3)
    s.add_argument("--csv", action="store_true", help="write patch CSVs instead of the binary layout")
    s.set_defaults(func=cmd_synth)

    def common(sp, run=False):
        sp.add_argument("--data", required=True)
        sp.add_argument("--config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--fold", default="all")
        sp.add_argument("--out")
        if run:
            sp.add_argument("--run", required=True)

    t = sub.add_parser("train")
    common(t)
    t.set_defaults(func=cmd_train)
    e = sub.add_parser("evaluate")
    common(e, run=True)
    e.set_defaults(func=cmd_evaluate)
    i = sub.add_parser("interpret")
    common(i, run=True)
    i.add_argument("--pathway")
    i.add_argument("--gene")
    i.add_argument("--exemplars", type=int, default=8)
    i.add_argument("--downsample", type=float, default=1.0)
    i.set_defaults(func=cmd_interpret)
    st = sub.add_parser("stats")
    common(st, run=True)
    st.add_argument("--entity-kind", required=True, choices=sorted(
        ["pathway_gate", "gene_importance", "within_pathway_genes", "prototype_gate", "fusion_gate", "cross_attention_row"]
    ))
    st.add_argument("--combine", action="store_true")
    st.add_argument("--pathway")
    st.add_argument("--prototype", type=int)
    st.add_argument("--alpha", type=float, default=0.05)
    st.add_argument("--mode", choices=["normal", "exact"], default="normal")
    st.set_defaults(func=cmd_stats)
    a = sub.add_parser("ablate")
    common(a)
    a.add_argument("--variant", choices=["fusion", "K"], required=True)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING), format="%(levelname)s %(message)s")
    if getattr(args, "out", None) is None and args.command in ("train", "ablate"):
        args.out = os.path.join("runs", args.command)
    try:
        args.func(args)
    except INPUT_ERRORS as exc:
        _report(exc, 2)
        return 2
    except ValueError as exc:
        _report(exc, 2)
        return 2
    except Exception as exc:  # noqa: BLE001
        _report(exc, 1)
        return 1
    return 0


def _report(exc, code):
    print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
