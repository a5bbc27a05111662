"""Functional-connectivity data: matrices, datasets, splits and a synthetic generator.

FC matrices are plain ``float64`` numpy arrays of shape ``(R, R)`` that are
symmetric with a zero diagonal. Datasets are immutable once built.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    ConstantSeries,
    DataError,
    DimensionMismatch,
    ParseError,
    ShapeError,
    SpecError,
    TooSmall,
)

log = logging.getLogger(__name__)

CLASS_NAMES = ("control", "patient")
CONTROL, PATIENT = 0, 1
SYMMETRY_TOL = 1e-9
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ["subject_id", "label", "site", "clinical_score", "fc_path"]


class NotSymmetric(DataError):
    pass


def n_edges(r: int) -> int:
    return r * (r - 1) // 2


def roi_count(n: int) -> int:
    """Invert ``n_edges``; raises ShapeError if ``n`` is not triangular."""
    r = int(round((1 + math.sqrt(1 + 8 * n)) / 2))
    if n_edges(r) != n:
        raise ShapeError(f"{n} is not a valid upper-triangle length")
    return r


def pearson_fc(timeseries) -> np.ndarray:
    """Pearson correlation between the columns of a ``T x R`` series, diagonal zeroed."""
    ts = np.asarray(timeseries, dtype=np.float64)
    if ts.ndim != 2:
        raise ShapeError(f"expected a T x R matrix, got shape {ts.shape}")
    if ts.shape[0] < 3:
        raise ShapeError(f"need at least 3 time points, got {ts.shape[0]}")
    centered = ts - ts.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    flat = np.flatnonzero(norms <= np.finfo(np.float64).tiny)
    if flat.size:
        raise ConstantSeries(f"constant ROI column(s): {flat.tolist()}")
    unit = centered / norms
    fc = unit.T @ unit
    fc = 0.5 * (fc + fc.T)
    np.clip(fc, -1.0, 1.0, out=fc)
    np.fill_diagonal(fc, 0.0)
    return fc


def vectorize_upper(fc) -> np.ndarray:
    """Strict upper triangle in row-major ``(i, j), i < j`` order."""
    fc = np.asarray(fc)
    if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {fc.shape}")
    iu = np.triu_indices(fc.shape[0], k=1)
    return fc[iu].copy()


def devectorize_symmetric(v, r: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != n_edges(r):
        raise ShapeError(f"vector of length {v.shape} does not match R={r} ({n_edges(r)} edges)")
    out = np.zeros((r, r), dtype=np.float64)
    iu = np.triu_indices(r, k=1)
    out[iu] = v
    out[(iu[1], iu[0])] = v
    return out


def validate_fc(values, r: Optional[int] = None) -> tuple[np.ndarray, int]:
    """Check an ingested FC matrix; returns ``(clean_matrix, n_clamped)``.

    Entries beyond [-1, 1] are clamped and counted, the diagonal is zeroed.
    """
    fc = np.array(values, dtype=np.float64)
    if fc.ndim != 2 or fc.shape[0] != fc.shape[1]:
        raise DimensionMismatch(f"FC matrix must be square, got shape {fc.shape}")
    if r is not None and fc.shape[0] != r:
        raise DimensionMismatch(f"FC matrix is {fc.shape[0]}x{fc.shape[1]}, expected {r}x{r}")
    if not np.all(np.isfinite(fc)):
        raise DataError("FC matrix contains non-finite values")
    asym = np.max(np.abs(fc - fc.T)) if fc.size else 0.0
    if asym > SYMMETRY_TOL:
        raise NotSymmetric(f"FC matrix asymmetric by {asym:.3g}")
    np.fill_diagonal(fc, 0.0)
    n_clamped = int(np.count_nonzero(np.abs(fc) > 1.0))
    if n_clamped:
        np.clip(fc, -1.0, 1.0, out=fc)
    return fc, n_clamped


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    label: int
    fc: np.ndarray
    site: Optional[str] = None
    clinical_score: Optional[float] = None
    subtype: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "fc", _frozen(self.fc))


@dataclass(frozen=True)
class Dataset:
    records: tuple[SubjectRecord, ...]
    r: int
    class_names: tuple[str, ...] = CLASS_NAMES
    planted_edges: Optional[tuple[tuple[int, int], ...]] = None
    n_clamped: int = 0

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        ids = [rec.subject_id for rec in self.records]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject_id in dataset")
        for rec in self.records:
            if rec.fc.shape != (self.r, self.r):
                raise DimensionMismatch(
                    f"subject {rec.subject_id}: FC shape {rec.fc.shape}, expected ({self.r}, {self.r})"
                )
            if not 0 <= rec.label < len(self.class_names):
                raise DataError(f"subject {rec.subject_id}: label {rec.label} out of range")

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([rec.label for rec in self.records], dtype=np.int64)

    @property
    def fcs(self) -> np.ndarray:
        if not self.records:
            return np.zeros((0, self.r, self.r))
        return np.stack([rec.fc for rec in self.records])

    @property
    def subject_ids(self) -> list[str]:
        return [rec.subject_id for rec in self.records]

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return replace(self, records=tuple(self.records[i] for i in indices), n_clamped=0)

    def by_id(self, subject_id: str) -> SubjectRecord:
        for rec in self.records:
            if rec.subject_id == subject_id:
                return rec
        raise KeyError(subject_id)


# --------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class SyntheticSpec:
    r: int = 20
    n_per_class: int = 100
    planted_edges: tuple[tuple[int, int], ...] = ()
    effect_size: float = 0.6
    n_subtypes: int = 1
    subtype_edge_overlap: float = 0.25
    noise_std: float = 0.05
    seed: int = 7
    n_sites: int = 1
    site_effect: float = 0.0
    base_scale: float = 0.5

    def validate(self):
        if self.r < 2:
            raise SpecError("r must be at least 2")
        if self.n_per_class < 1:
            raise SpecError("n_per_class must be positive")
        if self.n_subtypes < 1:
            raise SpecError("n_subtypes must be >= 1")
        if not 0.0 <= self.subtype_edge_overlap <= 1.0:
            raise SpecError("subtype_edge_overlap must lie in [0, 1]")
        if self.noise_std < 0 or self.site_effect < 0:
            raise SpecError("noise_std and site_effect must be non-negative")
        seen = set()
        for i, j in self.planted_edges:
            if not (0 <= i < j < self.r):
                raise SpecError(f"planted edge ({i}, {j}) is not an upper-triangular pair for R={self.r}")
            if (i, j) in seen:
                raise SpecError(f"planted edge ({i}, {j}) listed twice")
            seen.add((i, j))
        if self.planted_edges and self.n_subtypes > len(self.planted_edges):
            raise SpecError("more subtypes than planted edges")


def choose_planted_edges(r: int, n_planted: int, seed: int) -> tuple[tuple[int, int], ...]:
    """Pick ``n_planted`` edges inside the smallest ROI clique that can hold them.

    Concentrating the signal on a few hub ROIs keeps ROI-level ground truth
    meaningful for degree-centrality checks.
    """
    if n_planted > n_edges(r):
        raise SpecError(f"cannot plant {n_planted} edges with R={r}")
    if n_planted <= 0:
        return ()
    m = 2
    while n_edges(m) < n_planted:
        m += 1
    rng = np.random.default_rng([seed, 0x5EED])
    hubs = np.sort(rng.choice(r, size=m, replace=False))
    pairs = [(int(hubs[a]), int(hubs[b])) for a in range(m) for b in range(a + 1, m)]
    keep = np.sort(rng.choice(len(pairs), size=n_planted, replace=False))
    return tuple(pairs[k] for k in keep)


def subtype_edge_sets(n_planted: int, n_subtypes: int, overlap: float) -> list[np.ndarray]:
    """Indices into the planted list perturbed by each subtype.

    A shared core of ``overlap`` times the per-subtype size is common to all
    subtypes; the remainder is split into disjoint chunks.
    """
    idx = np.arange(n_planted)
    if n_subtypes == 1:
        return [idx]
    per = n_planted / (overlap + n_subtypes * (1.0 - overlap))
    core = min(n_planted, int(round(overlap * per)))
    if overlap >= 1.0:
        core = n_planted
    rest = idx[core:]
    if rest.size == 0:
        return [idx[:core] for _ in range(n_subtypes)]
    chunks = np.array_split(rest, n_subtypes)
    return [np.concatenate([idx[:core], c]) for c in chunks]


def _base_upper(r: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    # low-rank factor model gives a plausible correlation structure
    k = max(1, min(4, r // 4))
    loadings = rng.normal(size=(r, k))
    cov = loadings @ loadings.T + np.diag(rng.uniform(0.5, 1.5, size=r))
    sd = np.sqrt(np.diag(cov))
    corr = cov / np.outer(sd, sd)
    return scale * vectorize_upper(corr)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    r = spec.r
    iu_pos = {pair: k for k, pair in enumerate(zip(*np.triu_indices(r, k=1)))}
    base = _base_upper(r, spec.base_scale, rng)

    planted_pos = np.array([iu_pos[(i, j)] for i, j in spec.planted_edges], dtype=np.int64)
    # shift away from the base sign so |base + shift| stays within max(|base|, effect)
    signs = np.where(base[planted_pos] >= 0, -1.0, 1.0) if planted_pos.size else np.zeros(0)
    edge_sets = subtype_edge_sets(len(planted_pos), spec.n_subtypes, spec.subtype_edge_overlap)

    n = spec.n_per_class
    patient_subtypes = rng.permutation(np.arange(n) % spec.n_subtypes)
    site_offsets = rng.normal(0.0, spec.site_effect, size=(spec.n_sites, base.size))

    width = max(4, len(str(2 * n)))
    records = []
    for k in range(2 * n):
        label = CONTROL if k < n else PATIENT
        upper = base.copy()
        subtype = None
        score = None
        if label == PATIENT:
            subtype = int(patient_subtypes[k - n])
            chosen = edge_sets[subtype] if planted_pos.size else np.zeros(0, dtype=np.int64)
            upper[planted_pos[chosen]] += spec.effect_size * signs[chosen]
        site = None
        if spec.n_sites > 1:
            s = int(rng.integers(spec.n_sites))
            site = f"site{s}"
            upper += site_offsets[s]
        upper += rng.normal(0.0, spec.noise_std, size=upper.size)
        if label == PATIENT:
            score = float(10.0 + 5.0 * subtype + rng.normal(0.0, 2.0))
        np.clip(upper, -1.0, 1.0, out=upper)
        records.append(
            SubjectRecord(
                subject_id=f"sub-{k + 1:0{width}d}",
                label=label,
                fc=devectorize_symmetric(upper, r),
                site=site,
                clinical_score=score,
                subtype=subtype if spec.n_subtypes > 1 else None,
            )
        )
    return Dataset(records=tuple(records), r=r, planted_edges=tuple(spec.planted_edges))


# --------------------------------------------------------------------------
# splits


def _allocate(n: int, fractions: Sequence[float]) -> list[int]:
    counts = [int(round(f * n)) for f in fractions[:-1]]
    counts.append(n - sum(counts))
    return counts


def split(dataset: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test split, deterministic in ``seed``."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SpecError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    labels = dataset.labels
    parts: list[list[int]] = [[], [], []]
    for c in range(len(dataset.class_names)):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        counts = _allocate(idx.size, fractions)
        if min(counts) < 1:
            raise TooSmall(f"class {dataset.class_names[c]!r} ({idx.size} subjects) leaves an empty split")
        start = 0
        for p, cnt in enumerate(counts):
            parts[p].extend(idx[start : start + cnt].tolist())
            start += cnt
    return tuple(dataset.subset(sorted(p)) for p in parts)


def kfold(dataset: Dataset, k: int, seed: int = 0, val_fraction: float = 0.2):
    """Yield ``(train, val, test)`` per stratified fold; val is carved from the non-test part."""
    from sklearn.model_selection import StratifiedKFold, train_test_split

    if k < 2:
        raise SpecError("k-fold needs k >= 2")
    labels = dataset.labels
    if np.bincount(labels, minlength=2).min() < k:
        raise TooSmall(f"a class has fewer than k={k} subjects")
    folds = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    for rest, test in folds.split(np.zeros(len(labels)), labels):
        train, val = train_test_split(rest, test_size=val_fraction, stratify=labels[rest], random_state=seed)
        yield dataset.subset(sorted(train)), dataset.subset(sorted(val)), dataset.subset(sorted(test))


# --------------------------------------------------------------------------
# file formats


def _fmt(x: float) -> str:
    return repr(float(x))


def write_fc_csv(path: Path, fc: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for row in fc:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def read_fc_csv(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append([float(tok) for tok in line.split(",")])
            except ValueError as exc:
                raise ParseError(f"bad number ({exc})", path, lineno) from None
    widths = {len(row) for row in rows}
    if len(widths) > 1:
        raise DimensionMismatch(f"{path}: ragged rows (widths {sorted(widths)})")
    return np.array(rows, dtype=np.float64)


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "fc").mkdir(parents=True, exist_ok=True)
    has_subtype = any(rec.subtype is not None for rec in dataset.records)
    fields = MANIFEST_FIELDS + (["subtype"] if has_subtype else [])
    manifest = directory / MANIFEST_NAME
    with open(manifest, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for rec in dataset.records:
            rel = f"fc/{rec.subject_id}.csv"
            write_fc_csv(directory / rel, rec.fc)
            row = [
                rec.subject_id,
                dataset.class_names[rec.label],
                rec.site or "",
                "" if rec.clinical_score is None else _fmt(rec.clinical_score),
                rel,
            ]
            if has_subtype:
                row.append("" if rec.subtype is None else str(rec.subtype))
            writer.writerow(row)
    with open(directory / "classes.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(dataset.class_names) + "\n")
    if dataset.planted_edges is not None:
        with open(directory / "planted_edges.csv", "w", encoding="utf-8") as fh:
            fh.write("i,j\n")
            for i, j in dataset.planted_edges:
                fh.write(f"{i},{j}\n")
    return manifest


def _read_planted(path: Path) -> tuple[tuple[int, int], ...]:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.replace(" ", "") == "i,j":
                continue
            try:
                i, j = (int(tok) for tok in line.split(","))
            except ValueError:
                raise ParseError("expected 'i,j'", path, lineno) from None
            edges.append((i, j))
    return tuple(edges)


def load_dataset(manifest_path) -> Dataset:
    """Load a dataset from a manifest CSV (or the directory holding ``manifest.csv``)."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent

    class_file = root / "classes.txt"
    class_names = None
    if class_file.exists():
        class_names = tuple(line.strip() for line in class_file.read_text("utf-8").splitlines() if line.strip())

    rows = []
    with open(manifest_path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty manifest", manifest_path, 1) from None
        missing = [f for f in MANIFEST_FIELDS if f not in header]
        if missing:
            raise ParseError(f"missing column(s) {missing}", manifest_path, 1)
        col = {name: k for k, name in enumerate(header)}
        for row in reader:
            lineno = reader.line_num
            if not row or all(not tok.strip() for tok in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", manifest_path, lineno)
            rows.append((lineno, {name: row[k].strip() for name, k in col.items()}))

    if class_names is None:
        seen = sorted({row["label"] for _, row in rows})
        class_names = CLASS_NAMES if set(seen) <= set(CLASS_NAMES) else tuple(seen)
    name_to_idx = {name: k for k, name in enumerate(class_names)}

    records = []
    r = None
    n_clamped = 0
    for lineno, row in rows:
        if row["label"] not in name_to_idx:
            raise ParseError(f"unknown label {row['label']!r}", manifest_path, lineno)
        score = None
        if row["clinical_score"]:
            try:
                score = float(row["clinical_score"])
            except ValueError:
                raise ParseError(f"bad clinical_score {row['clinical_score']!r}", manifest_path, lineno) from None
        subtype = None
        if row.get("subtype"):
            try:
                subtype = int(row["subtype"])
            except ValueError:
                raise ParseError(f"bad subtype {row['subtype']!r}", manifest_path, lineno) from None
        fc_path = root / row["fc_path"]
        if not fc_path.exists():
            raise ParseError(f"fc_path not found: {row['fc_path']}", manifest_path, lineno)
        raw = read_fc_csv(fc_path)
        if r is None:
            r = raw.shape[0]
        try:
            fc, clamped = validate_fc(raw, r)
        except DataError as exc:
            raise type(exc)(f"{fc_path}: {exc}") from None
        n_clamped += clamped
        records.append(
            SubjectRecord(
                subject_id=row["subject_id"],
                label=name_to_idx[row["label"]],
                fc=fc,
                site=row["site"] or None,
                clinical_score=score,
                subtype=subtype,
            )
        )
    if n_clamped:
        log.warning("clamped %d FC entries outside [-1, 1] while loading %s", n_clamped, manifest_path)
    planted = None
    if (root / "planted_edges.csv").exists():
        planted = _read_planted(root / "planted_edges.csv")
    return Dataset(records=tuple(records), r=r or 0, class_names=class_names, planted_edges=planted, n_clamped=n_clamped)
