"""Two-stage pathway vocabulary curation and bipartite gene-pathway graph build.

Stage 1 turns a Reactome GMT + hierarchy relations (plus Hallmark sets) into a
base vocabulary; stage 2 intersects it with the measured genes of a cohort and
emits the bipartite graph.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import re
from collections import deque
from dataclasses import asdict, dataclass, field
from graphlib import CycleError, TopologicalSorter
from itertools import combinations

import numpy as np

log = logging.getLogger(__name__)

# top-level Reactome categories removed wholesale
DEFAULT_EXCLUDED = (
    "Drug ADME",
    "Disease",
    "Metabolism of proteins",
    "Gene expression (Transcription)",
    "Organelle biogenesis and maintenance",
    "Protein localization",
    "Transport of small molecules",
    "Vesicle-mediated transport",
    "DNA Replication",
    "Neuronal System",
    "Sensory Perception",
    "Muscle contraction",
    "Digestion and absorption",
    "Reproduction",
    "Circadian clock",
    "Metabolism",
    "Developmental Biology",
)

_STABLE_ID = re.compile(r"^R-[A-Z]{3}-\d+$")


class ParseError(ValueError):
    pass


class StructureError(ValueError):
    pass


class InputError(ValueError):
    pass


@dataclass(frozen=True)
class GeneSet:
    id: str
    name: str
    source: str
    genes: frozenset

    def __post_init__(self):
        if not self.genes:
            raise ValueError(f"gene set {self.id} is empty")


@dataclass
class CurationConfig:
    target_depth: int = 5
    min_genes: int = 3
    max_genes: int = 200
    jaccard_threshold: float = 1.0
    excluded_categories: tuple = DEFAULT_EXCLUDED
    min_coverage_genes: int = 2
    species_prefix: str = "R-HSA"
    min_pathway_variance: float | None = None

    def __post_init__(self):
        if self.min_genes < 1:
            raise ValueError("min_genes must be >= 1")
        if not 0.0 < self.jaccard_threshold <= 1.0:
            raise ValueError("jaccard_threshold must lie in (0, 1]")
        self.excluded_categories = tuple(self.excluded_categories)

    def base_filename(self):
        return (
            f"pathways_base_d{self.target_depth}_g{self.min_genes}-{self.max_genes}"
            f"_j{int(round(self.jaccard_threshold * 100))}"
        )


@dataclass
class HierarchyDag:
    nodes: list
    edges: list  # (parent, child)
    names: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)
    top_category: dict = field(default_factory=dict)

    def __post_init__(self):
        self.children = {n: set() for n in self.nodes}
        self.parents = {n: set() for n in self.nodes}
        for p, c in self.edges:
            self.children.setdefault(p, set()).add(c)
            self.parents.setdefault(c, set()).add(p)
            self.children.setdefault(c, set())
            self.parents.setdefault(p, set())
        self.nodes = sorted(self.children)

    def is_leaf(self, node):
        return not self.children.get(node)

    def roots(self):
        return [n for n in self.nodes if not self.parents[n]]


@dataclass
class BipartiteGraph:
    """Genes and pathways linked by membership; each membership is one
    bidirectional edge (gene->pathway and pathway->gene when directed)."""

    gene_index: dict
    pathway_index: dict
    memberships: list  # (gene node id, pathway node id) within each index

    @property
    def G(self):
        return len(self.gene_index)

    @property
    def P(self):
        return len(self.pathway_index)

    @property
    def genes(self):
        return sorted(self.gene_index, key=self.gene_index.get)

    @property
    def pathways(self):
        return sorted(self.pathway_index, key=self.pathway_index.get)

    def directed_edges(self):
        """(src, dst) arrays over the joint node numbering: genes 0..G-1, pathways G..G+P-1."""
        m = np.asarray(self.memberships, dtype=np.int64).reshape(-1, 2)
        g, p = m[:, 0], m[:, 1] + self.G
        return np.concatenate([g, p]), np.concatenate([p, g])

    def dense_membership(self):
        mat = np.zeros((self.G, self.P))
        for g, p in self.memberships:
            mat[g, p] = 1.0
        return mat

    def pathway_genes(self, pathway_id):
        p = self.pathway_index[pathway_id]
        names = self.genes
        return [names[g] for g, q in self.memberships if q == p]


# parsing

def _infer_source(pid):
    if _STABLE_ID.match(pid):
        return "Reactome"
    if pid.startswith("HALLMARK_"):
        return "Hallmark"
    return "custom"


def parse_gmt(text, source=None):
    """One :class:`GeneSet` per non-empty line: ``id<TAB>description<TAB>genes...``.

    Reactome's own export puts the display name first and the stable id second;
    when the second field looks like a stable id the two are swapped.  Without
    an explicit ``source`` it is inferred from the id.
    """
    sets = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise ParseError(f"line {lineno}: expected at least 3 tab-separated fields, got {len(fields)}")
        first, second = fields[0].strip(), fields[1].strip()
        if _STABLE_ID.match(second) and not _STABLE_ID.match(first):
            pid, name = second, first
        else:
            pid, name = first, second
        genes = frozenset(g.strip() for g in fields[2:] if g.strip())
        if not genes:
            raise ParseError(f"line {lineno}: gene set {pid} has no genes")
        if pid in seen:
            raise ParseError(f"line {lineno}: duplicate gene set id {pid}")
        seen.add(pid)
        sets.append(GeneSet(pid, name, source or _infer_source(pid), genes))
    return sets


def parse_relations(text, species_prefix="R-HSA"):
    edges = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        fields = raw.strip().split("\t")
        if len(fields) != 2:
            raise ParseError(f"line {lineno}: expected 'parent<TAB>child', got {raw!r}")
        parent, child = fields[0].strip(), fields[1].strip()
        if parent.startswith(species_prefix) and child.startswith(species_prefix):
            edges.append((parent, child))
    return edges


def parse_gene_list(text):
    """Measured genes: one symbol per line, or a comma/tab separated header row."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        return []
    if len(lines) == 1 or "," in lines[0] or "\t" in lines[0]:
        head = re.split(r"[,\t]", lines[0])
        return [h.strip() for h in head if h.strip() and h.strip() != "patient_id"]
    return [ln.strip() for ln in lines]


def write_gmt(sets):
    buf = io.StringIO()
    for s in sets:
        buf.write("\t".join([s.id, s.name, *sorted(s.genes)]) + "\n")
    return buf.getvalue()


def write_edge_csv(graph: BipartiteGraph):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["gene_symbol", "pathway_id"])
    genes, pathways = graph.genes, graph.pathways
    for g, p in graph.memberships:
        w.writerow([genes[g], pathways[p]])
    return buf.getvalue()


def read_edge_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    by_pathway = {}
    for row in rows:
        by_pathway.setdefault(row["pathway_id"], set()).add(row["gene_symbol"])
    return build_bipartite([GeneSet(p, p, _infer_source(p), frozenset(g)) for p, g in by_pathway.items()])


# hierarchy

def build_dag(sets, edges, names=None):
    names = dict(names or {})
    for s in sets:
        names.setdefault(s.id, s.name)
    return HierarchyDag(nodes=[s.id for s in sets], edges=list(edges), names=names)


def compute_depths(dag: HierarchyDag):
    """Depth = 1 + shortest distance from any root; top category = name of the
    lexicographically smallest ancestral root."""
    try:
        order = list(TopologicalSorter({n: dag.parents[n] for n in dag.nodes}).static_order())
    except CycleError as exc:
        raise StructureError(f"hierarchy contains a cycle: {exc.args[1]}") from exc
    roots = dag.roots()
    depth = {}
    queue = deque()
    for r in roots:
        depth[r] = 1
        queue.append(r)
    while queue:
        n = queue.popleft()
        for c in sorted(dag.children[n]):
            if c not in depth:
                depth[c] = depth[n] + 1
                queue.append(c)
    root_anc = {}
    for n in order:
        if not dag.parents[n]:
            root_anc[n] = {n}
        else:
            acc = set()
            for p in dag.parents[n]:
                acc |= root_anc[p]
            root_anc[n] = acc
    dag.depth = depth
    dag.top_category = {n: dag.names.get(min(root_anc[n]), min(root_anc[n])) for n in dag.nodes}
    return dag


# stage 1 filters

def select_by_depth(dag, sets, target_depth):
    kept = []
    for s in sets:
        d = dag.depth.get(s.id)
        if d is None:
            continue
        if d == target_depth or (d < target_depth and dag.is_leaf(s.id)):
            kept.append(s)
    return kept


def exclude_categories(sets, dag, excluded, warnings=None):
    excluded = set(excluded)
    known = set(dag.top_category.values())
    for name in sorted(excluded - known):
        msg = f"excluded category {name!r} not found among top-level categories"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    return [s for s in sets if dag.top_category.get(s.id) not in excluded]


def filter_size(sets, min_genes, max_genes):
    return [s for s in sets if min_genes <= len(s.genes) <= max_genes]


def jaccard(a, b):
    a, b = set(a), set(b)
    union = a | b
    if not union:
        raise ValueError("Jaccard similarity undefined for two empty sets")
    return len(a & b) / len(union)


def merge_hallmark(reactome_sets, hallmark_sets):
    """Union of both collections; Reactome sets identical to a Hallmark set are dropped."""
    r_ids = {s.id for s in reactome_sets}
    clash = sorted(r_ids & {s.id for s in hallmark_sets})
    if clash:
        raise InputError(f"Hallmark ids collide with Reactome ids: {clash[:5]}")
    hallmark_genes = {s.genes for s in hallmark_sets}
    kept = [s for s in reactome_sets if s.genes not in hallmark_genes]
    return kept + list(hallmark_sets)


def _priority(s, dag):
    if s.source == "Hallmark" or s.id not in dag.depth:
        leaf, depth = True, 0
    else:
        leaf, depth = dag.is_leaf(s.id), dag.depth[s.id]
    # sorts ascending: best first
    return (not leaf, -depth, -len(s.genes), s.id)


def dedup_jaccard(sets, dag, threshold=1.0, report=None):
    """Collapse connected groups with pairwise Jaccard >= threshold to one
    representative: leaf, then deeper, then larger, then alphabetical id."""
    sets = sorted(sets, key=lambda s: s.id)
    parent = list(range(len(sets)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if threshold >= 1.0:
        by_genes = {}
        for i, s in enumerate(sets):
            by_genes.setdefault(s.genes, []).append(i)
        for idx in by_genes.values():
            for j in idx[1:]:
                parent[find(j)] = find(idx[0])
    else:
        for i, j in combinations(range(len(sets)), 2):
            if jaccard(sets[i].genes, sets[j].genes) >= threshold:
                parent[find(j)] = find(i)
    groups = {}
    for i in range(len(sets)):
        groups.setdefault(find(i), []).append(sets[i])
    kept = []
    for members in groups.values():
        ranked = sorted(members, key=lambda s: _priority(s, dag))
        kept.append(ranked[0])
        if report is not None and len(ranked) > 1:
            report.append({"kept": ranked[0].id, "removed": [s.id for s in ranked[1:]]})
    return sorted(kept, key=lambda s: s.id)


# stage 2

def coverage_filter(sets, measured_genes, min_coverage_genes=2):
    measured = frozenset(measured_genes)
    if not measured:
        raise InputError("no measured genes supplied")
    out = []
    for s in sets:
        inter = s.genes & measured
        if len(inter) >= min_coverage_genes:
            out.append(GeneSet(s.id, s.name, s.source, inter))
    return out


def variance_filter(sets, expression, gene_names, min_variance=None):
    """Drop pathways whose mean-member activity varies less than ``min_variance``
    across patients.  ``min_variance=None`` keeps everything."""
    if min_variance is None:
        return list(sets)
    col = {g: i for i, g in enumerate(gene_names)}
    expression = np.asarray(expression, dtype=np.float64)
    out = []
    for s in sets:
        idx = [col[g] for g in sorted(s.genes) if g in col]
        if idx and expression[:, idx].mean(axis=1).var() >= min_variance:
            out.append(s)
    return out


def build_bipartite(sets):
    genes = sorted({g for s in sets for g in s.genes})
    pathways = sorted(s.id for s in sets)
    gene_index = {g: i for i, g in enumerate(genes)}
    pathway_index = {p: i for i, p in enumerate(pathways)}
    memberships = []
    for s in sorted(sets, key=lambda s: s.id):
        p = pathway_index[s.id]
        memberships.extend((gene_index[g], p) for g in sorted(s.genes))
    return BipartiteGraph(gene_index, pathway_index, memberships)


def graph_stats(graph: BipartiteGraph, sets=None):
    deg_g = np.bincount([g for g, _ in graph.memberships], minlength=graph.G)
    deg_p = np.bincount([p for _, p in graph.memberships], minlength=graph.P)
    out = {
        "genes": graph.G,
        "pathways": graph.P,
        "bidirectional_edges": len(graph.memberships),
        "mean_genes_per_pathway": float(deg_p.mean()) if graph.P else 0.0,
        "mean_pathways_per_gene": float(deg_g.mean()) if graph.G else 0.0,
    }
    if sets is not None:
        for src in ("Reactome", "Hallmark"):
            out[f"pathways_{src.lower()}"] = sum(1 for s in sets if s.source == src)
    return out


def set_stats(sets):
    sizes = np.array([len(s.genes) for s in sets]) if sets else np.zeros(0)
    per_gene = {}
    for s in sets:
        for g in s.genes:
            per_gene[g] = per_gene.get(g, 0) + 1
    counts = np.array(list(per_gene.values())) if per_gene else np.zeros(0)
    return {
        "pathways": len(sets),
        "reactome": sum(1 for s in sets if s.source == "Reactome"),
        "hallmark": sum(1 for s in sets if s.source == "Hallmark"),
        "unique_genes": len(per_gene),
        "mean_genes_per_pathway": float(sizes.mean()) if sizes.size else 0.0,
        "median_genes_per_pathway": float(np.median(sizes)) if sizes.size else 0.0,
        "mean_pathways_per_gene": float(counts.mean()) if counts.size else 0.0,
        "genes_in_single_pathway": int((counts == 1).sum()),
        "genes_in_10plus_pathways": int((counts >= 10).sum()),
    }


def digest(data: bytes):
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass
class CurationManifest:
    config: dict
    stage_counts: dict
    inputs: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    notes: list = field(default_factory=list)
    base_stats: dict = field(default_factory=dict)
    graph_stats: dict = field(default_factory=dict)
    redundancy: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def curate_base(reactome_gmt, relations, hallmark_gmt="", config=None, names=None):
    """Stage 1.  Returns (base sets, manifest)."""
    config = config or CurationConfig()
    reactome = parse_gmt(reactome_gmt, source="Reactome")
    hallmark = parse_gmt(hallmark_gmt, source="Hallmark") if hallmark_gmt else []
    edges = parse_relations(relations, config.species_prefix)
    species = [s for s in reactome if s.id.startswith(config.species_prefix)]
    dag = compute_depths(build_dag(species, edges, names))
    counts = {"loaded": len(species)}
    warnings, report = [], []
    sel = select_by_depth(dag, species, config.target_depth)
    counts["depth_selected"] = len(sel)
    sel = exclude_categories(sel, dag, config.excluded_categories, warnings)
    counts["category_excluded"] = len(sel)
    sel = filter_size(sel, config.min_genes, config.max_genes)
    counts["size_filtered"] = len(sel)
    sel = merge_hallmark(sel, hallmark)
    counts["hallmark_merged"] = len(sel)
    sel = dedup_jaccard(sel, dag, config.jaccard_threshold, report)
    counts["deduplicated"] = len(sel)
    cfg = asdict(config)
    cfg["excluded_categories"] = list(config.excluded_categories)
    manifest = CurationManifest(
        config=cfg,
        stage_counts=counts,
        inputs={
            "reactome_gmt": digest(reactome_gmt.encode()),
            "relations": digest(relations.encode()),
            "hallmark_gmt": digest(hallmark_gmt.encode()),
        },
        warnings=warnings,
        notes=["leaf status for redundancy priority is evaluated on the full hierarchy"],
        base_stats=set_stats(sel),
        redundancy=report,
    )
    return sel, manifest


def curate_graph(base_sets, measured_genes, config=None, expression=None):
    """Stage 2.  Returns (filtered sets, graph, manifest)."""
    config = config or CurationConfig()
    measured = list(measured_genes)
    covered = coverage_filter(base_sets, measured, config.min_coverage_genes)
    if not covered:
        missing = sorted({g for s in base_sets for g in s.genes} - set(measured))
        raise InputError(
            f"no pathway retains enough measured genes; {len(missing)} pathway genes are unmeasured, "
            f"e.g. {missing[:20]}"
        )
    if expression is not None:
        covered = variance_filter(covered, expression, measured, config.min_pathway_variance)
    graph = build_bipartite(covered)
    cfg = asdict(config)
    cfg["excluded_categories"] = list(config.excluded_categories)
    manifest = CurationManifest(
        config=cfg,
        stage_counts={"base": len(base_sets), "coverage_filtered": len(covered)},
        inputs={"measured_genes": digest("\n".join(sorted(measured)).encode())},
        base_stats=set_stats(base_sets),
        graph_stats=graph_stats(graph, covered),
    )
    return covered, graph, manifest
