"""Readers and writers for the on-disk artifacts, with validation on ingest.

Every writer produces text or bytes that its reader maps back to identical
objects, so write -> read -> write is byte-stable.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .prototype import PatchBag
from .survival import SurvivalRecord

PATCH_MAGIC = b"MMSVPTCH"
HASH_ALGORITHM = "sha256"


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


def sha256_bytes(data: bytes):
    return hashlib.sha256(data).hexdigest()


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# patches


def patches_to_csv(features, coords):
    features = np.asarray(features, dtype=np.float32)
    coords = np.asarray(coords, dtype=np.float32)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["x", "y"] + [f"f{j}" for j in range(features.shape[1])])
    for (x, y), row in zip(coords, features):
        w.writerow([repr(float(x)), repr(float(y))] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _check_patches(arr, source):
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 3:
        raise FormatError(f"{source}: need at least one patch row with x, y and one feature")
    if not np.all(np.isfinite(arr)):
        raise FormatError(f"{source}: non-finite values")


def patches_from_csv(text, source="<csv>"):
    """Parse ``x,y,f0..f{D-1}``; values are stored as float32 like the binary layout."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise FormatError(f"{source}: empty file")
    header = rows[0]
    d = len(header) - 2
    if header[:2] != ["x", "y"] or header[2:] != [f"f{j}" for j in range(d)]:
        raise FormatError(f"{source}: header must be x,y,f0..f{{D-1}}")
    try:
        arr = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float32)
    except ValueError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    if any(len(r) != d + 2 for r in rows[1:]):
        raise FormatError(f"{source}: ragged rows")
    _check_patches(arr.reshape(-1, d + 2), source)
    arr = arr.astype(np.float64)
    return arr[:, 2:], arr[:, :2]


def patches_to_bytes(features, coords):
    """Magic, uint32 D, uint32 N, then N rows of float32 (x, y, f0..f{D-1})."""
    features = np.asarray(features, dtype=np.float32)
    coords = np.asarray(coords, dtype=np.float32)
    n, d = features.shape
    body = np.hstack([coords, features]).astype("<f4").tobytes()
    return PATCH_MAGIC + struct.pack("<II", d, n) + body


def patches_from_bytes(data, source="<bin>"):
    if data[: len(PATCH_MAGIC)] != PATCH_MAGIC:
        raise FormatError(f"{source}: bad magic")
    off = len(PATCH_MAGIC)
    d, n = struct.unpack_from("<II", data, off)
    off += 8
    if len(data) - off != 4 * n * (d + 2):
        raise FormatError(f"{source}: expected {n} rows of {d + 2} floats")
    arr = np.frombuffer(data, dtype="<f4", offset=off).reshape(n, d + 2)
    _check_patches(arr, source)
    arr = arr.astype(np.float64)
    return arr[:, 2:], arr[:, :2]


def load_patch_file(path, patient_id, slide_id):
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(PATCH_MAGIC):
        feats, coords = patches_from_bytes(data, str(path))
    else:
        feats, coords = patches_from_csv(data.decode("utf-8"), str(path))
    return PatchBag(patient_id, feats, coords, slide_id)


# expression


def expression_to_csv(expression, genes):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id"] + list(genes))
    for pid in sorted(expression):
        w.writerow([pid] + [repr(float(v)) for v in expression[pid]])
    return buf.getvalue()


def read_expression_header(text):
    first = text.split("\n", 1)[0]
    header = next(csv.reader([first]))
    if not header or header[0] != "patient_id":
        raise FormatError("expression header must start with patient_id")
    return header[1:]


def expression_from_csv(text, graph_genes, warnings=None):
    """Rows aligned to ``graph_genes``.  Extra columns are ignored with a warning;
    missing graph genes are an error."""
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0][0] != "patient_id":
        raise FormatError("expression header must start with patient_id")
    header = rows[0][1:]
    col = {g: i for i, g in enumerate(header)}
    missing = [g for g in graph_genes if g not in col]
    if missing:
        raise FormatError(f"expression is missing {len(missing)} graph genes: {missing[:10]}")
    extra = sorted(set(header) - set(graph_genes))
    if extra and warnings is not None:
        warnings.append(f"ignored {len(extra)} expression columns not in the graph")
    idx = [col[g] for g in graph_genes]
    out = {}
    for r in rows[1:]:
        if len(r) != len(header) + 1:
            raise FormatError(f"patient {r[0] if r else '?'}: expected {len(header) + 1} fields")
        vals = np.array([float(r[1 + i]) for i in idx])
        if not np.all(np.isfinite(vals)):
            raise FormatError(f"patient {r[0]}: non-finite expression")
        if r[0] in out:
            raise FormatError(f"duplicate patient {r[0]}")
        out[r[0]] = vals
    return out


# survival


def survival_to_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "time_months", "event"])
    for pid in sorted(records):
        r = records[pid]
        w.writerow([pid, repr(float(r.time)), r.event])
    return buf.getvalue()


def survival_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["patient_id", "time_months", "event"]:
        raise FormatError("survival header must be patient_id,time_months,event")
    out = {}
    for r in rows[1:]:
        try:
            rec = SurvivalRecord(r[0], float(r[1]), int(r[2]))
        except (ValueError, IndexError) as exc:
            raise FormatError(f"bad survival row {r}: {exc}") from exc
        if rec.patient_id in out:
            raise FormatError(f"duplicate patient {rec.patient_id}")
        out[rec.patient_id] = rec
    return out


# slide index: patient_id,slide_id,path


def slides_from_csv(text):
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["patient_id", "slide_id", "path"]:
        raise FormatError("slide index header must be patient_id,slide_id,path")
    return [tuple(r) for r in rows[1:]]


# statistics tables


def fold_stats_csv(results):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entity", "U", "p", "r", "mean_rank_diff", "n_low", "n_high", "fold"])
    for r in results:
        w.writerow([r.entity, repr(r.u), repr(r.p), repr(r.r), repr(r.mean_rank_diff), r.n_low, r.n_high, r.fold])
    return buf.getvalue()


def meta_stats_csv(meta):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entity", "Z", "p", "effect", "q", "significant", "folds_used", "combinable"])
    for m in meta:
        w.writerow([m.entity, repr(m.z), repr(m.p), repr(m.effect), repr(m.q), int(m.significant), m.folds_used, int(m.combinable)])
    return buf.getvalue()


# manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)  # path -> digest
    outputs: dict = field(default_factory=dict)  # path -> digest
    seeds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    started: str = ""
    finished: str = ""
    hash_algorithm: str = HASH_ALGORITHM

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=_json_default) + "\n"

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")

