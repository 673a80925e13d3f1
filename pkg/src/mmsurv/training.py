"""Fold-based training with per-patient AdamW steps and best-validation selection."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .model import SurvivalModel
from .prototype import kmeans_init
from .survival import MetricError, bin_index, c_index, fit_bins, nll_loss, risk_score, survival_curve

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MMSVCKPT"
CKPT_VERSION = 1


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FoldSplit:
    fold: int
    train_ids: tuple
    val_ids: tuple

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.val_ids)
        if overlap:
            raise ValueError(f"fold {self.fold}: train and validation overlap on {sorted(overlap)[:5]}")


def make_folds(patient_ids, n_folds=5, seed=42):
    """Shuffle once, deal patients round-robin into folds."""
    ids = sorted(patient_ids)
    if len(ids) < n_folds:
        raise ValueError(f"{len(ids)} patients cannot fill {n_folds} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    buckets = [[] for _ in range(n_folds)]
    for pos, i in enumerate(order):
        buckets[pos % n_folds].append(ids[i])
    splits = []
    for f in range(n_folds):
        val = tuple(sorted(buckets[f]))
        train = tuple(sorted(p for g in range(n_folds) if g != f for p in buckets[g]))
        splits.append(FoldSplit(f, train, val))
    return splits


def _streams(seed, fold):
    """Generators for init, shuffling and dropout.

    Initialisation depends on the seed alone, so every fold starts from the
    same parameters; shuffling and dropout streams are fold specific.
    """
    shuffle, drop = np.random.SeedSequence([seed, fold]).spawn(2)
    return np.random.default_rng(seed), np.random.default_rng(shuffle), np.random.default_rng(drop)


@dataclass
class Checkpoint:
    config: TrainConfig
    state: dict
    bin_edges: np.ndarray
    best_cindex: float
    best_epoch: int
    fold: int = 0
    rng_states: dict = field(default_factory=dict)

    def to_bytes(self):
        names = sorted(self.state)
        header = {
            "config": self.config.to_dict(),
            "fold": self.fold,
            "best_cindex": self.best_cindex,
            "best_epoch": self.best_epoch,
            "bin_edges": [float(x).hex() for x in self.bin_edges],
            "rng_states": self.rng_states,
            "params": [[n, list(self.state[n].shape)] for n in names],
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(blob)), blob]
        parts += [np.ascontiguousarray(self.state[n], dtype="<f8").tobytes() for n in names]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data):
        if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError("not a checkpoint file (bad magic)")
        off = len(CKPT_MAGIC)
        version, n = struct.unpack_from("<IQ", data, off)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += struct.calcsize("<IQ")
        header = json.loads(data[off : off + n].decode("utf-8"))
        off += n
        state = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape)) if shape else 1
            state[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).astype(np.float64).reshape(shape)
            off += 8 * count
        if off != len(data):
            raise ValueError("trailing bytes after checkpoint parameters")
        return cls(
            config=TrainConfig.from_dict(header["config"]),
            state=state,
            bin_edges=np.array([float.fromhex(x) for x in header["bin_edges"]]),
            best_cindex=header["best_cindex"],
            best_epoch=header["best_epoch"],
            fold=header["fold"],
            rng_states=header["rng_states"],
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def predict(model, cohort, ids):
    """Eval-mode forward for each patient; returns (logits B-array per id, risks)."""
    logits = np.stack(
        [model(cohort.bags[p].features, cohort.expression[p], training=False).logits.data for p in ids]
    )
    return logits, risk_score(survival_curve(logits))


def cohort_cindex(cohort, ids, risks):
    times = [cohort.records[p].time for p in ids]
    events = [cohort.records[p].event for p in ids]
    return c_index(risks, times, events)


def fit_fold_bins(cohort, ids, n_bins):
    return fit_bins([cohort.records[p].time for p in ids], [cohort.records[p].event for p in ids], n_bins)


def fold_centroids(config, cohort, train_ids, cache=None):
    """k-means centroids from training bags only, memoised per training set."""
    if config.branches == "gene_only":
        return None
    key = (tuple(train_ids), config.K, config.seed, config.kmeans_budget, config.kmeans_batch, config.kmeans_restarts)
    if cache is not None and key in cache:
        return cache[key]
    cent = kmeans_init(
        [cohort.bags[p] for p in train_ids],
        config.K,
        budget=config.kmeans_budget,
        batch_size=config.kmeans_batch,
        restarts=config.kmeans_restarts,
        seed=config.seed,
    )
    if cache is not None:
        cache[key] = cent
    return cent


@dataclass
class EpochLog:
    fold: int
    epoch: int
    train_loss: float
    val_cindex: float


@dataclass
class FoldResult:
    checkpoint: Checkpoint
    val_ids: tuple
    val_risks: np.ndarray
    val_logits: np.ndarray
    history: list


def train_model(config, cohort, train_ids, eval_ids=None, fold=0, centroids=None, on_epoch=None):
    """Train for ``config.max_epochs`` and keep the parameters with the best
    C-index on ``eval_ids`` (strict improvement).  ``on_epoch(epoch, model,
    cindex)`` may return True to stop early.
    """
    init_rng, shuffle_rng, drop_rng = _streams(config.seed, fold)
    edges = fit_fold_bins(cohort, train_ids, config.B)
    bins = {p: int(bin_index(cohort.records[p].time, edges)) for p in train_ids}
    model = SurvivalModel(config, cohort.graph, cohort.feature_dim, centroids, init_rng)
    params = model.parameters()
    opt = ad.AdamW(params, config.lr, config.weight_decay)
    eval_ids = tuple(eval_ids if eval_ids is not None else train_ids)
    best = (-math.inf, -1, None)
    history = []
    train_ids = list(train_ids)
    for epoch in range(config.max_epochs):
        total = 0.0
        for i in shuffle_rng.permutation(len(train_ids)):
            pid = train_ids[i]
            rec = cohort.records[pid]
            with ad.Tape() as tape:
                out = model(cohort.bags[pid].features, cohort.expression[pid], rng=drop_rng, training=True)
                loss = nll_loss(out.logits, bins[pid], rec.event)
            opt.step(ad.backward(tape, loss, params))
            total += loss.item()
        _, risks = predict(model, cohort, eval_ids)
        try:
            score = cohort_cindex(cohort, eval_ids, risks)
        except MetricError as exc:
            raise ProtocolError(f"fold {fold}: validation C-index undefined") from exc
        history.append(EpochLog(fold, epoch, total / len(train_ids), score))
        if score > best[0]:
            best = (score, epoch, model.state())
        if on_epoch is not None and on_epoch(epoch, model, score):
            break
    ckpt = Checkpoint(
        config=config,
        state=best[2],
        bin_edges=edges,
        best_cindex=best[0],
        best_epoch=best[1],
        fold=fold,
        rng_states={"shuffle": _jsonable(shuffle_rng.bit_generator.state), "dropout": _jsonable(drop_rng.bit_generator.state)},
    )
    return model, ckpt, history


def _jsonable(state):
    return json.loads(json.dumps(state, default=int))


def restore_model(ckpt: Checkpoint, cohort):
    model = SurvivalModel(ckpt.config, cohort.graph, cohort.feature_dim, None, np.random.default_rng(0))
    model.load_state(ckpt.state)
    return model


def run_fold(config: TrainConfig, split: FoldSplit, cohort, kmeans_cache=None):
    centroids = fold_centroids(config, cohort, split.train_ids, kmeans_cache)
    _, ckpt, history = train_model(config, cohort, split.train_ids, split.val_ids, split.fold, centroids)
    model = restore_model(ckpt, cohort)
    logits, risks = predict(model, cohort, split.val_ids)
    log.info("fold %d: best val C-index %.4f at epoch %d", split.fold, ckpt.best_cindex, ckpt.best_epoch)
    return FoldResult(ckpt, split.val_ids, risks, logits, history)


def leakage_flags(config, cohort, split):
    """Refit bins and centroids with validation patients injected.

    A True flag means the training-only fit differs from the leaky one, i.e.
    validation data would have changed it.
    """
    leaky = tuple(split.train_ids) + tuple(split.val_ids)
    flags = {"bins": not np.array_equal(fit_fold_bins(cohort, split.train_ids, config.B), fit_fold_bins(cohort, leaky, config.B))}
    if config.branches != "gene_only":
        clean = fold_centroids(config, cohort, split.train_ids)
        dirty = fold_centroids(config, cohort, leaky)
        flags["centroids"] = not np.array_equal(clean, dirty)
    return flags


def history_csv(history):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["fold", "epoch", "train_loss", "val_cindex"])
    for h in history:
        w.writerow([h.fold, h.epoch, repr(h.train_loss), repr(h.val_cindex)])
    return buf.getvalue()


def risk_csv(ids, risks, logits):
    """patient_id,risk,bin,S1..SB; ``bin`` is the most probable event bin."""
    surv = survival_curve(logits)
    n_bins = surv.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "risk", "bin"] + [f"S{b + 1}" for b in range(n_bins)])
    for pid, r, s in zip(ids, risks, surv):
        mass = np.concatenate([[1.0], s[:-1]]) - s
        w.writerow([pid, repr(float(r)), int(np.argmax(mass))] + [repr(float(v)) for v in s])
    return buf.getvalue()


# ablation


@dataclass
class AblationRow:
    label: str
    config: TrainConfig
    fold_cindex: list

    @property
    def mean(self):
        return float(np.mean(self.fold_cindex))

    @property
    def se(self):
        c = np.asarray(self.fold_cindex)
        return float(c.std(ddof=1) / math.sqrt(c.size)) if c.size > 1 else 0.0


def run_grid(base: TrainConfig, grid, cohort, folds=None):
    """Run every override dict in ``grid`` over the same folds and seed."""
    folds = folds or make_folds(cohort.patient_ids, base.n_folds, base.seed)
    cache = {}
    rows = []
    for overrides in grid:
        cfg = base.replace(**overrides)
        label = ",".join(f"{k}={v}" for k, v in sorted(overrides.items())) or "base"
        scores = [run_fold(cfg, split, cohort, cache).checkpoint.best_cindex for split in folds]
        rows.append(AblationRow(label, cfg, scores))
    return rows


def grid_csv(rows):
    n_folds = max(len(r.fold_cindex) for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "fusion_variant", "branches", "K", "seed"] + [f"fold{f}" for f in range(n_folds)] + ["mean", "se"])
    for r in rows:
        w.writerow(
            [r.label, r.config.fusion_variant, r.config.branches, r.config.K, r.config.seed]
            + [repr(float(c)) for c in r.fold_cindex]
            + [repr(r.mean), repr(r.se)]
        )
    return buf.getvalue()


FUSION_GRID = [{"fusion_variant": v} for v in ("cross_attention", "concatenation", "bilinear", "gated")]
K_GRID = [{"K": k} for k in (4, 8, 16)]
