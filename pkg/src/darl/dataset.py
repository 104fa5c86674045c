"""Data model, file I/O, and synthetic ID/OOD corpus generation.

The corpus stands in for a production log dump: labeled in-distribution
splits, a large unlabeled pool mixing ID rows with rows from a shifted
distribution, and a held-back truth table for oracle labeling and
evaluation.  Grades follow a 3-point scale (SR/WR/IR) planted by linear
scoring rules so that a model trained on ID data alone degrades on the
shifted rows.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    BadMagicError,
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    DuplicateIdError,
    NonFiniteValueError,
    TruncatedPayloadError,
)
from .util import order_stat_quantile, sub_rng

EMBEDDING_MAGIC = b"EMB1"
LABEL_HEADER = "id\tgrade\torigin"

# Target grade mix for planted rules (SR / WR / IR), mirroring the heavy
# irrelevance skew of production relevance data.
GRADE_MIX = {"SR": 0.25, "WR": 0.10, "IR": 0.65}
_CALIBRATION_DRAWS = 20_000


class RelevanceGrade(enum.IntEnum):
    """3-point relevance scale; token form is the member name."""

    IR = 0
    WR = 1
    SR = 2

    @classmethod
    def from_token(cls, token: str) -> "RelevanceGrade":
        try:
            return cls[token]
        except KeyError:
            raise DataFormatError(f"unknown grade token {token!r}") from None


class Origin(enum.IntEnum):
    ID = 0
    OOD = 1

    @classmethod
    def from_token(cls, token: str) -> "Origin":
        try:
            return cls[token]
        except KeyError:
            raise DataFormatError(f"unknown origin token {token!r}") from None


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Dense row-major feature matrix with one opaque string id per row."""

    data: np.ndarray
    ids: tuple[str, ...]

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2:
            raise DimensionMismatchError("embedding data must be 2-dimensional")
        if not np.isfinite(data).all():
            raise NonFiniteValueError("embedding data contains non-finite values")
        ids = tuple(self.ids)
        if len(ids) != data.shape[0]:
            raise DimensionMismatchError(
                f"{len(ids)} ids for {data.shape[0]} rows"
            )
        if len(set(ids)) != len(ids):
            raise DuplicateIdError("duplicate row ids in embedding matrix")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "ids", ids)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> int:
        return self.data.shape[1]

    @cached_property
    def row_of(self) -> dict[str, int]:
        return {rid: i for i, rid in enumerate(self.ids)}

    def take(self, indices: Sequence[int]) -> "EmbeddingMatrix":
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingMatrix(self.data[idx], tuple(self.ids[i] for i in idx))


@dataclass(frozen=True)
class LabeledDataset:
    """Embeddings joined with relevance grades and an ID/OOD origin tag."""

    embeddings: EmbeddingMatrix
    grades: np.ndarray
    origin: np.ndarray

    def __post_init__(self):
        grades = np.asarray(self.grades, dtype=np.int8)
        origin = np.asarray(self.origin, dtype=np.int8)
        n = self.embeddings.rows
        if grades.shape != (n,):
            raise DimensionMismatchError(f"{grades.shape[0]} grades for {n} rows")
        if origin.shape != (n,):
            raise DimensionMismatchError(f"{origin.shape[0]} origin tags for {n} rows")
        if grades.size and (grades.min() < 0 or grades.max() > 2):
            raise DataFormatError("grade codes outside the SR/WR/IR scale")
        if origin.size and (origin.min() < 0 or origin.max() > 1):
            raise DataFormatError("origin codes outside {ID, OOD}")
        object.__setattr__(self, "grades", _freeze(grades))
        object.__setattr__(self, "origin", _freeze(origin))

    @property
    def rows(self) -> int:
        return self.embeddings.rows

    @property
    def ids(self) -> tuple[str, ...]:
        return self.embeddings.ids

    def take(self, indices: Sequence[int]) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(
            self.embeddings.take(idx), self.grades[idx], self.origin[idx]
        )

    def grade_counts(self) -> dict[RelevanceGrade, int]:
        return {
            g: int(np.count_nonzero(self.grades == int(g))) for g in RelevanceGrade
        }


@dataclass(frozen=True)
class SyntheticConfig:
    """Recipe for the synthetic corpus; every field has a workable default."""

    dims: int = 32
    id_cluster_count: int = 8
    ood_cluster_count: int = 4
    ood_shift_norm: float = 6.0
    ood_concept_shift: bool = True
    label_noise_rate: float = 0.05
    train_size: int = 10_000
    val_size: int = 2_000
    test_size: int = 4_000
    pool_size: int = 50_000
    pool_ood_fraction: float = 0.3
    pretrain_size: int = 1_000
    pretrain_extra_clusters: int = 8
    seed: int = 7

    def validate(self) -> "SyntheticConfig":
        counts = {
            "dims": self.dims,
            "id_cluster_count": self.id_cluster_count,
            "ood_cluster_count": self.ood_cluster_count,
            "train_size": self.train_size,
            "val_size": self.val_size,
            "test_size": self.test_size,
            "pool_size": self.pool_size,
            "pretrain_size": self.pretrain_size,
            "pretrain_extra_clusters": self.pretrain_extra_clusters,
        }
        for name, value in counts.items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(name, f"must be a positive integer, got {value!r}")
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ConfigError(
                "label_noise_rate", f"must be in [0, 0.5), got {self.label_noise_rate!r}"
            )
        # 0 is the degenerate no-shift mode used to sanity-check selection
        if self.ood_shift_norm < 0.0:
            raise ConfigError(
                "ood_shift_norm", f"must be >= 0, got {self.ood_shift_norm!r}"
            )
        if not 0.0 <= self.pool_ood_fraction < 1.0:
            raise ConfigError(
                "pool_ood_fraction",
                f"must be in [0, 1), got {self.pool_ood_fraction!r}",
            )
        return self


@dataclass(frozen=True)
class SyntheticCorpus:
    train_id: LabeledDataset
    val_id: LabeledDataset
    test_id: LabeledDataset
    pool_unlabeled: EmbeddingMatrix
    pool_truth: LabeledDataset


@dataclass(frozen=True)
class PlantedRule:
    """Linear grading rule: score s = w.x - mu; SR above +tau, IR below -tau."""

    w: np.ndarray
    mu: float
    tau: float

    def grade_of(self, points: np.ndarray) -> np.ndarray:
        s = points @ self.w - self.mu
        grades = np.full(s.shape, int(RelevanceGrade.WR), dtype=np.int8)
        grades[s > self.tau] = int(RelevanceGrade.SR)
        grades[s < -self.tau] = int(RelevanceGrade.IR)
        return grades


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _sample_mixture(
    centers: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    picks = rng.integers(0, centers.shape[0], size=n)
    return centers[picks] + rng.standard_normal((n, centers.shape[1]))


def _calibrate_rule(
    w: np.ndarray, centers: np.ndarray, rng: np.random.Generator
) -> PlantedRule:
    """Pick (mu, tau) so the planted grade mix lands near GRADE_MIX."""
    scores = _sample_mixture(centers, _CALIBRATION_DRAWS, rng) @ w
    upper = order_stat_quantile(scores, 1.0 - GRADE_MIX["SR"])
    lower = order_stat_quantile(scores, GRADE_MIX["IR"])
    return PlantedRule(w=w, mu=(upper + lower) / 2.0, tau=(upper - lower) / 2.0)


def _resample_noise(
    grades: np.ndarray, rate: float, rng: np.random.Generator
) -> np.ndarray:
    if rate <= 0.0:
        return grades
    noisy = grades.copy()
    hit = rng.random(grades.shape[0]) < rate
    noisy[hit] = rng.integers(0, 3, size=int(hit.sum()), dtype=np.int8)
    return noisy


@dataclass(frozen=True)
class _Blueprint:
    """Deterministic centers and rules shared by every split of one corpus."""

    config: SyntheticConfig
    id_centers: np.ndarray
    ood_centers: np.ndarray
    extra_centers: np.ndarray
    id_rule: PlantedRule
    ood_rule: PlantedRule
    extra_rules: tuple[PlantedRule, ...]


def _blueprint(config: SyntheticConfig) -> _Blueprint:
    cfg = config.validate()
    b = cfg.dims
    proj = sub_rng(cfg.seed, "projections")
    w1 = _unit(proj.standard_normal(b))
    w2 = _unit(proj.standard_normal(b))

    id_centers = sub_rng(cfg.seed, "id-centers").standard_normal(
        (cfg.id_cluster_count, b)
    )
    if cfg.ood_shift_norm > 0.0:
        dirs = sub_rng(cfg.seed, "ood-centers").standard_normal(
            (cfg.ood_cluster_count, b)
        )
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        ood_centers = cfg.ood_shift_norm * dirs
    else:
        # degenerate no-shift mode: the "OOD" rows come from the ID mixture
        ood_centers = id_centers

    id_rule = _calibrate_rule(w1, id_centers, sub_rng(cfg.seed, "calibrate", "id"))
    if cfg.ood_concept_shift:
        ood_rule = _calibrate_rule(
            0.6 * w1 + 0.8 * w2, ood_centers, sub_rng(cfg.seed, "calibrate", "ood")
        )
    else:
        ood_rule = id_rule
    extra_centers = sub_rng(cfg.seed, "extra-centers").standard_normal(
        (cfg.pretrain_extra_clusters, b)
    )
    # each extra cluster grades by its own direction, calibrated on its own
    # draws, so pretraining sees several unrelated labeling concepts
    extra_rng = sub_rng(cfg.seed, "calibrate", "extra")
    extra_rules = tuple(
        _calibrate_rule(
            _unit(extra_rng.standard_normal(b)), extra_centers[j : j + 1], extra_rng
        )
        for j in range(cfg.pretrain_extra_clusters)
    )
    return _Blueprint(
        config=cfg,
        id_centers=id_centers,
        ood_centers=ood_centers,
        extra_centers=extra_centers,
        id_rule=id_rule,
        ood_rule=ood_rule,
        extra_rules=extra_rules,
    )


def _labeled_split(
    bp: _Blueprint, name: str, size: int, prefix: str
) -> LabeledDataset:
    cfg = bp.config
    points = _sample_mixture(bp.id_centers, size, sub_rng(cfg.seed, "rows", name))
    grades = bp.id_rule.grade_of(points)
    grades = _resample_noise(
        grades, cfg.label_noise_rate, sub_rng(cfg.seed, "noise", name)
    )
    ids = tuple(f"{prefix}-{i:06d}" for i in range(size))
    matrix = EmbeddingMatrix(points.astype(np.float32), ids)
    return LabeledDataset(matrix, grades, np.zeros(size, dtype=np.int8))


def generate_synthetic(config: SyntheticConfig) -> SyntheticCorpus:
    """Generate the full corpus: labeled ID splits plus the mixed pool.

    Deterministic given ``config.seed``.  ``pool_unlabeled`` carries no
    labels; ``pool_truth`` records each pool row's true grade and origin and
    is only consulted for oracle labeling and evaluation.
    """
    bp = _blueprint(config)
    cfg = bp.config

    train_id = _labeled_split(bp, "train_id", cfg.train_size, "train")
    val_id = _labeled_split(bp, "val_id", cfg.val_size, "val")
    test_id = _labeled_split(bp, "test_id", cfg.test_size, "test")

    n_ood = int(round(cfg.pool_size * cfg.pool_ood_fraction))
    n_id = cfg.pool_size - n_ood
    id_rows = _sample_mixture(bp.id_centers, n_id, sub_rng(cfg.seed, "rows", "pool_id"))
    ood_rows = _sample_mixture(
        bp.ood_centers, n_ood, sub_rng(cfg.seed, "rows", "pool_ood")
    )
    points = np.concatenate([id_rows, ood_rows], axis=0)
    grades = np.concatenate(
        [bp.id_rule.grade_of(id_rows), bp.ood_rule.grade_of(ood_rows)]
    )
    origin = np.concatenate(
        [
            np.zeros(n_id, dtype=np.int8),
            np.full(n_ood, int(Origin.OOD), dtype=np.int8),
        ]
    )
    perm = sub_rng(cfg.seed, "pool-shuffle").permutation(cfg.pool_size)
    points, grades, origin = points[perm], grades[perm], origin[perm]
    grades = _resample_noise(
        grades, cfg.label_noise_rate, sub_rng(cfg.seed, "noise", "pool")
    )
    ids = tuple(f"pool-{i:06d}" for i in range(cfg.pool_size))
    pool = EmbeddingMatrix(points.astype(np.float32), ids)
    pool_truth = LabeledDataset(pool, grades, origin)

    return SyntheticCorpus(
        train_id=train_id,
        val_id=val_id,
        test_id=test_id,
        pool_unlabeled=pool,
        pool_truth=pool_truth,
    )


def generate_pretrain_superset(config: SyntheticConfig) -> LabeledDataset:
    """Broad corpus for backbone pretraining: ID clusters plus extra clusters.

    Rows from each extra cluster are graded by that cluster's own planted
    rule, so the pretrained representation covers more of the input space and
    more labeling concepts than the target task alone.  Kept deliberately
    small so pretraining shapes the representation without erasing the input
    geometry that the distance-based selector depends on.
    """
    bp = _blueprint(config)
    cfg = bp.config
    rng = sub_rng(cfg.seed, "rows", "pretrain")
    n = cfg.pretrain_size
    total_clusters = cfg.id_cluster_count + cfg.pretrain_extra_clusters
    centers = np.concatenate([bp.id_centers, bp.extra_centers], axis=0)
    picks = rng.integers(0, total_clusters, size=n)
    points = centers[picks] + rng.standard_normal((n, cfg.dims))
    grades = bp.id_rule.grade_of(points)
    for j, rule in enumerate(bp.extra_rules):
        mask = picks == cfg.id_cluster_count + j
        if mask.any():
            grades[mask] = rule.grade_of(points[mask])
    grades = _resample_noise(
        grades, cfg.label_noise_rate, sub_rng(cfg.seed, "noise", "pretrain")
    )
    ids = tuple(f"pre-{i:06d}" for i in range(n))
    matrix = EmbeddingMatrix(points.astype(np.float32), ids)
    return LabeledDataset(matrix, grades, np.zeros(n, dtype=np.int8))


# ---------------------------------------------------------------------------
# file formats


def write_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write the binary embedding format (magic, header, f32 payload, ids)."""
    parts = [EMBEDDING_MAGIC, struct.pack("<II", matrix.rows, matrix.dims)]
    parts.append(np.ascontiguousarray(matrix.data, dtype="<f4").tobytes())
    parts.append(struct.pack("<I", matrix.rows))
    for rid in matrix.ids:
        raw = rid.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise DataFormatError(f"id too long to serialize: {rid[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    Path(path).write_bytes(b"".join(parts))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Parse the binary embedding format, rejecting malformed payloads."""
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != EMBEDDING_MAGIC:
        raise BadMagicError(f"bad magic in {path}", offset=0)
    if len(blob) < 12:
        raise TruncatedPayloadError(f"truncated header in {path}", offset=len(blob))
    rows, dims = struct.unpack_from("<II", blob, 4)
    offset = 12
    need = rows * dims * 4
    if len(blob) < offset + need:
        raise TruncatedPayloadError(
            f"embedding payload needs {need} bytes, file ends early", offset=len(blob)
        )
    data = np.frombuffer(blob, dtype="<f4", count=rows * dims, offset=offset)
    finite = np.isfinite(data)
    if not finite.all():
        bad = int(np.argmin(finite))
        raise NonFiniteValueError(
            f"non-finite value at row {bad // dims} col {bad % dims}",
            offset=offset + bad * 4,
        )
    data = data.reshape(rows, dims).copy()
    offset += need
    if len(blob) < offset + 4:
        raise TruncatedPayloadError("truncated id block header", offset=len(blob))
    (id_count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if id_count != rows:
        raise DataFormatError(
            f"id count {id_count} does not match {rows} rows", offset=offset - 4
        )
    ids = []
    for _ in range(rows):
        if len(blob) < offset + 2:
            raise TruncatedPayloadError("truncated id length", offset=len(blob))
        (ln,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if len(blob) < offset + ln:
            raise TruncatedPayloadError("truncated id string", offset=len(blob))
        try:
            ids.append(blob[offset : offset + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise DataFormatError(f"id is not valid UTF-8: {exc}", offset=offset)
        offset += ln
    if offset != len(blob):
        raise DataFormatError(
            f"{len(blob) - offset} trailing bytes after id block", offset=offset
        )
    return EmbeddingMatrix(data, tuple(ids))


def write_labels(dataset: LabeledDataset, path: str | Path) -> None:
    """Write the label TSV (id, grade token, origin token)."""
    lines = [LABEL_HEADER]
    for i, rid in enumerate(dataset.ids):
        grade = RelevanceGrade(int(dataset.grades[i])).name
        origin = Origin(int(dataset.origin[i])).name
        lines.append(f"{rid}\t{grade}\t{origin}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_labels(path: str | Path) -> dict[str, tuple[RelevanceGrade, Origin]]:
    """Parse the label TSV into an ordered id -> (grade, origin) mapping."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != LABEL_HEADER:
        raise DataFormatError(f"label file {path} missing header {LABEL_HEADER!r}")
    out: dict[str, tuple[RelevanceGrade, Origin]] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        cells = line.split("\t")
        if len(cells) != 3:
            raise DataFormatError(f"line {lineno}: expected 3 columns, got {len(cells)}")
        rid, grade, origin = cells
        if rid in out:
            raise DuplicateIdError(f"line {lineno}: duplicate id {rid!r}")
        out[rid] = (RelevanceGrade.from_token(grade), Origin.from_token(origin))
    return out


def load_labeled_dataset(
    embeddings_path: str | Path, labels_path: str | Path
) -> LabeledDataset:
    """Join an embedding file with its label TSV by row id."""
    matrix = load_embeddings(embeddings_path)
    labels = load_labels(labels_path)
    missing = [rid for rid in matrix.ids if rid not in labels]
    if missing:
        raise DataFormatError(
            f"{len(missing)} rows missing labels (first: {missing[0]!r})"
        )
    if len(labels) != matrix.rows:
        raise DataFormatError(
            f"label file has {len(labels)} rows, embeddings have {matrix.rows}"
        )
    grades = np.array([int(labels[rid][0]) for rid in matrix.ids], dtype=np.int8)
    origin = np.array([int(labels[rid][1]) for rid in matrix.ids], dtype=np.int8)
    return LabeledDataset(matrix, grades, origin)


# ---------------------------------------------------------------------------
# dataset algebra


def merge_datasets(d_id: LabeledDataset, d_ood: LabeledDataset) -> LabeledDataset:
    """Union of two labeled datasets; origin tags and row order are kept."""
    a, b = d_id.embeddings, d_ood.embeddings
    if b.rows == 0:
        return d_id
    if a.rows == 0:
        return d_ood
    if a.dims != b.dims:
        raise DimensionMismatchError(f"dims differ: {a.dims} vs {b.dims}")
    overlap = set(a.ids) & set(b.ids)
    if overlap:
        raise DuplicateIdError(f"overlapping ids, e.g. {sorted(overlap)[0]!r}")
    merged = EmbeddingMatrix(
        np.concatenate([a.data, b.data], axis=0), a.ids + b.ids
    )
    return LabeledDataset(
        merged,
        np.concatenate([d_id.grades, d_ood.grades]),
        np.concatenate([d_id.origin, d_ood.origin]),
    )


def split_dataset(
    dataset: LabeledDataset, fractions: Sequence[float], seed: int
) -> list[LabeledDataset]:
    """Deterministic stratified partition preserving the grade mix.

    Rows are assigned per grade so each part's grade proportions track the
    input's; any remainder when fractions sum below 1 is dropped.
    """
    if dataset.rows == 0:
        raise DataFormatError("cannot split an empty dataset")
    fracs = [float(f) for f in fractions]
    if not fracs or any(f <= 0 for f in fracs):
        raise ConfigError("fractions", f"must all be positive, got {fracs!r}")
    if sum(fracs) > 1.0 + 1e-9:
        raise ConfigError("fractions", f"sum {sum(fracs):.6f} exceeds 1")

    cum = np.cumsum(fracs)
    parts: list[list[np.ndarray]] = [[] for _ in fracs]
    for g in RelevanceGrade:
        rows = np.flatnonzero(dataset.grades == int(g))
        if rows.size == 0:
            continue
        rows = rows[sub_rng(seed, "split", int(g)).permutation(rows.size)]
        bounds = np.round(cum * rows.size).astype(int)
        start = 0
        for j, stop in enumerate(bounds):
            parts[j].append(rows[start:stop])
            start = stop
    out = []
    for j, chunks in enumerate(parts):
        idx = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.intp)
        idx = idx[sub_rng(seed, "split-order", j).permutation(idx.size)]
        out.append(dataset.take(idx))
    return out
