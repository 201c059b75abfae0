"""Parsing and alignment of expression matrices, phenotype tables, and gene sets.

All parsers are strict: malformed input raises :class:`DataError` with the
offending line number, never a silently corrected object. Construction of the
dataclasses themselves performs no validation, so internal callers (e.g. the
bootstrap engine, which produces duplicated sample ids on purpose) can build
them directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "ExpressionMatrix",
    "PhenotypeTable",
    "GeneSet",
    "GeneSetCollection",
    "AnalysisBundle",
    "parse_expression_matrix",
    "write_expression_matrix",
    "parse_phenotype",
    "parse_gmt",
    "parse_annotation",
    "build_bundle",
]


class DataError(ValueError):
    """An input artifact violates its format or consistency contract."""


def _check_ids(ids: list[str], kind: str, source: str) -> None:
    if any(i == "" for i in ids):
        raise DataError(f"{source}: empty {kind} identifier")
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for i in ids:
            if i in seen:
                raise DataError(f"{source}: duplicate {kind} identifier {i!r}")
            seen.add(i)


@dataclass
class ExpressionMatrix:
    """Dense features x samples matrix of finite measurement values."""

    feature_ids: list[str]
    sample_ids: list[str]
    values: np.ndarray  # shape (n_features, n_samples), float64

    @property
    def n_features(self) -> int:
        return len(self.feature_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def validate(self, source: str = "expression matrix") -> None:
        _check_ids(self.feature_ids, "feature", source)
        _check_ids(self.sample_ids, "sample", source)
        if self.values.shape != (len(self.feature_ids), len(self.sample_ids)):
            raise DataError(
                f"{source}: value matrix shape {self.values.shape} does not match "
                f"{len(self.feature_ids)} features x {len(self.sample_ids)} samples"
            )
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise DataError(
                f"{source}: non-finite value at feature "
                f"{self.feature_ids[bad[0]]!r}, sample {self.sample_ids[bad[1]]!r}"
            )


@dataclass
class PhenotypeTable:
    """Per-sample binary outcome plus optional numeric adjustment covariates.

    ``group_names`` holds the two original labels ordered lexicographically,
    so ``group_names[z[j]]`` recovers sample j's label and the smaller label
    always encodes to 0.
    """

    sample_ids: list[str]
    z: np.ndarray  # int8 per sample, values in {0, 1}
    group_names: tuple[str, str]
    covariates: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    def validate(self, source: str = "phenotype table") -> None:
        _check_ids(self.sample_ids, "sample", source)
        n = len(self.sample_ids)
        if self.z.shape != (n,):
            raise DataError(f"{source}: group vector length mismatch")
        for g in (0, 1):
            count = int(np.sum(self.z == g))
            if count < 2:
                raise DataError(
                    f"{source}: group {self.group_names[g]!r} has {count} samples, need >= 2"
                )
        for name, col in self.covariates.items():
            if col.shape != (n,):
                raise DataError(f"{source}: covariate {name!r} length mismatch")
            if not np.all(np.isfinite(col)):
                raise DataError(f"{source}: covariate {name!r} has non-finite values")

    def subset(self, indices: np.ndarray) -> "PhenotypeTable":
        """Reorder/resample rows; used for alignment and bootstrap replicates."""
        return PhenotypeTable(
            sample_ids=[self.sample_ids[i] for i in indices],
            z=self.z[indices],
            group_names=self.group_names,
            covariates={k: v[indices] for k, v in self.covariates.items()},
        )


@dataclass(frozen=True)
class GeneSet:
    set_id: str
    description: str
    gene_ids: frozenset[str]


@dataclass
class GeneSetCollection:
    """Ordered list of named gene sets plus a feature -> gene annotation map."""

    sets: list[GeneSet]
    annotation: dict[str, str] = field(default_factory=dict)

    def validate(self, source: str = "gene set collection") -> None:
        _check_ids([s.set_id for s in self.sets], "set", source)
        for s in self.sets:
            if not s.gene_ids:
                raise DataError(f"{source}: set {s.set_id!r} is empty")


@dataclass
class AnalysisBundle:
    """Matrix, phenotype, and set membership aligned into one testable unit.

    ``universe`` indexes the features eligible for enrichment (those carrying
    a gene annotation); ``memberships[i]`` indexes the member features of
    ``sets[i]``, and ``universe_positions[i]`` holds the same members as
    positions within ``universe``. Sets that retained fewer than the minimum
    number of member features are listed in ``dropped_sets``.
    """

    matrix: ExpressionMatrix
    phenotype: PhenotypeTable
    sets: list[GeneSet]
    universe: np.ndarray  # feature indices with an annotated gene, ascending
    memberships: list[np.ndarray]  # per set: member feature indices, ascending
    universe_positions: list[np.ndarray]  # per set: members as positions in universe
    dropped_sets: list[tuple[str, int]] = field(default_factory=list)

    @property
    def set_ids(self) -> list[str]:
        return [s.set_id for s in self.sets]

    @property
    def set_sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.memberships], dtype=np.int64)

    def resample(self, indices: np.ndarray) -> "AnalysisBundle":
        """Rebuild the bundle with samples taken (with repetition) at ``indices``.

        Set membership and the universe are feature-level structures and are
        shared, not copied.
        """
        matrix = ExpressionMatrix(
            feature_ids=self.matrix.feature_ids,
            sample_ids=[self.matrix.sample_ids[i] for i in indices],
            values=self.matrix.values[:, indices],
        )
        return AnalysisBundle(
            matrix=matrix,
            phenotype=self.phenotype.subset(indices),
            sets=self.sets,
            universe=self.universe,
            memberships=self.memberships,
            universe_positions=self.universe_positions,
            dropped_sets=self.dropped_sets,
        )


def _read_lines(path: str | Path, source: str) -> list[str]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{source}: file not found: {path}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DataError(f"{source}: empty file: {path}")
    return lines


def _parse_cell(token: str, line_no: int, column: str, source: str) -> float:
    try:
        value = float(token)
    except ValueError:
        raise DataError(
            f"{source}: line {line_no}: non-numeric value {token!r} in column {column!r}"
        ) from None
    if not np.isfinite(value):
        raise DataError(
            f"{source}: line {line_no}: non-finite value {token!r} in column {column!r}"
        )
    return value


def parse_expression_matrix(path: str | Path) -> ExpressionMatrix:
    """Parse a tab-separated expression matrix.

    Expected layout: a header row ``feature_id<TAB>sample1<TAB>...`` followed
    by one row per feature with the feature id and one numeric field per
    sample. Row and column order is preserved.
    """
    source = f"expression matrix {path}"
    lines = _read_lines(path, source)
    header = lines[0].split("\t")
    if len(header) < 2:
        raise DataError(f"{source}: line 1: header has no sample columns")
    sample_ids = header[1:]
    _check_ids(sample_ids, "sample", source)
    if len(lines) == 1:
        raise DataError(f"{source}: no feature rows")

    feature_ids: list[str] = []
    rows = np.empty((len(lines) - 1, len(sample_ids)), dtype=np.float64)
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(sample_ids) + 1:
            raise DataError(
                f"{source}: line {line_no}: expected {len(sample_ids) + 1} fields, "
                f"got {len(fields)}"
            )
        feature_ids.append(fields[0])
        for j, token in enumerate(fields[1:]):
            rows[line_no - 2, j] = _parse_cell(token, line_no, sample_ids[j], source)
    _check_ids(feature_ids, "feature", source)

    matrix = ExpressionMatrix(feature_ids=feature_ids, sample_ids=sample_ids, values=rows)
    matrix.validate(source)
    return matrix


def write_expression_matrix(matrix: ExpressionMatrix, path: str | Path) -> None:
    """Write a matrix in the same TSV layout that :func:`parse_expression_matrix` reads."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("feature_id\t" + "\t".join(matrix.sample_ids) + "\n")
        for i, fid in enumerate(matrix.feature_ids):
            row = "\t".join(repr(float(v)) for v in matrix.values[i])
            fh.write(f"{fid}\t{row}\n")


def parse_phenotype(path: str | Path, group_column: str) -> PhenotypeTable:
    """Parse a tab-separated phenotype table.

    The header must contain ``sample_id`` and ``group_column``; every other
    column is read as a numeric covariate. The group column must take exactly
    two distinct values with at least two samples each; the lexicographically
    smaller label encodes to 0.
    """
    source = f"phenotype table {path}"
    lines = _read_lines(path, source)
    header = lines[0].split("\t")
    if "sample_id" not in header:
        raise DataError(f"{source}: missing required column 'sample_id'")
    if group_column not in header:
        raise DataError(f"{source}: missing group column {group_column!r}")
    sample_col = header.index("sample_id")
    group_col = header.index(group_column)
    covariate_cols = [
        (j, name)
        for j, name in enumerate(header)
        if j not in (sample_col, group_col)
    ]

    sample_ids: list[str] = []
    labels: list[str] = []
    covariates: dict[str, list[float]] = {name: [] for _, name in covariate_cols}
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(header):
            raise DataError(
                f"{source}: line {line_no}: expected {len(header)} fields, got {len(fields)}"
            )
        sample_ids.append(fields[sample_col])
        labels.append(fields[group_col])
        for j, name in covariate_cols:
            covariates[name].append(_parse_cell(fields[j], line_no, name, source))
    if not sample_ids:
        raise DataError(f"{source}: no sample rows")
    _check_ids(sample_ids, "sample", source)

    distinct = sorted(set(labels))
    if len(distinct) != 2:
        raise DataError(
            f"{source}: group column {group_column!r} has {len(distinct)} distinct "
            f"values {distinct}, need exactly 2"
        )
    z = np.array([distinct.index(lab) for lab in labels], dtype=np.int8)

    table = PhenotypeTable(
        sample_ids=sample_ids,
        z=z,
        group_names=(distinct[0], distinct[1]),
        covariates={name: np.array(col, dtype=np.float64) for name, col in covariates.items()},
    )
    table.validate(source)
    return table


def parse_gmt(path: str | Path) -> GeneSetCollection:
    """Parse a GMT file: one set per line, ``set_id<TAB>description<TAB>gene...``.

    Duplicate genes within one set are deduplicated; empty gene tokens
    (e.g. trailing tabs) are ignored; set order is preserved.
    """
    source = f"GMT file {path}"
    lines = _read_lines(path, source)
    sets: list[GeneSet] = []
    seen: set[str] = set()
    for line_no, line in enumerate(lines, start=1):
        if line.strip() == "":
            continue
        fields = line.split("\t")
        if len(fields) < 3:
            raise DataError(
                f"{source}: line {line_no}: expected at least 3 tab-separated fields, "
                f"got {len(fields)}"
            )
        set_id, description = fields[0], fields[1]
        if set_id in seen:
            raise DataError(f"{source}: line {line_no}: duplicate set id {set_id!r}")
        seen.add(set_id)
        genes = frozenset(g for g in fields[2:] if g != "")
        if not genes:
            raise DataError(f"{source}: line {line_no}: set {set_id!r} has no genes")
        sets.append(GeneSet(set_id=set_id, description=description, gene_ids=genes))
    if not sets:
        raise DataError(f"{source}: no gene sets")
    return GeneSetCollection(sets=sets)


def parse_annotation(path: str | Path) -> dict[str, str]:
    """Parse a feature -> gene annotation TSV with header ``feature_id<TAB>gene_id``.

    Each feature maps to at most one gene; a feature listed twice is an error.
    Rows with an empty gene field mark the feature as unannotated and are
    skipped.
    """
    source = f"annotation table {path}"
    lines = _read_lines(path, source)
    header = lines[0].split("\t")
    if len(header) < 2:
        raise DataError(f"{source}: line 1: expected 2 columns, got {len(header)}")
    annotation: dict[str, str] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) < 2:
            raise DataError(f"{source}: line {line_no}: expected 2 fields")
        feature, gene = fields[0], fields[1]
        if feature in annotation:
            raise DataError(
                f"{source}: line {line_no}: feature {feature!r} annotated more than once"
            )
        if gene == "":
            continue
        annotation[feature] = gene
    return annotation


def build_bundle(
    matrix: ExpressionMatrix,
    phenotype: PhenotypeTable,
    sets: GeneSetCollection,
    annotation: dict[str, str] | None = None,
    min_set_size: int = 5,
    universe_policy: str = "annotated",
) -> AnalysisBundle:
    """Align the three inputs into an analysis-ready bundle.

    A gene in a set contributes every feature annotated to it. Sets retaining
    fewer than ``min_set_size`` member features are dropped and reported in
    ``dropped_sets``. The enrichment universe is every feature with a gene
    annotation (``universe_policy="annotated"``, the default) or every
    measured feature (``"all"``).
    """
    if annotation is None:
        annotation = sets.annotation
    if universe_policy not in ("annotated", "all"):
        raise DataError(f"unknown universe policy {universe_policy!r}")

    if set(matrix.sample_ids) != set(phenotype.sample_ids):
        only_m = sorted(set(matrix.sample_ids) - set(phenotype.sample_ids))[:3]
        only_p = sorted(set(phenotype.sample_ids) - set(matrix.sample_ids))[:3]
        raise DataError(
            "sample sets differ between expression matrix and phenotype table "
            f"(matrix-only: {only_m}, phenotype-only: {only_p})"
        )
    order = [phenotype.sample_ids.index(s) for s in matrix.sample_ids]
    phenotype = phenotype.subset(np.array(order, dtype=np.intp))

    gene_to_features: dict[str, list[int]] = {}
    for i, fid in enumerate(matrix.feature_ids):
        gene = annotation.get(fid)
        if gene is not None:
            gene_to_features.setdefault(gene, []).append(i)

    if universe_policy == "annotated":
        universe = np.array(
            sorted(i for feats in gene_to_features.values() for i in feats),
            dtype=np.intp,
        )
    else:
        universe = np.arange(matrix.n_features, dtype=np.intp)

    surviving: list[GeneSet] = []
    memberships: list[np.ndarray] = []
    dropped: list[tuple[str, int]] = []
    for s in sets.sets:
        member = sorted(
            i for g in s.gene_ids for i in gene_to_features.get(g, ())
        )
        if len(member) < min_set_size:
            dropped.append((s.set_id, len(member)))
            continue
        restricted = frozenset(g for g in s.gene_ids if g in gene_to_features)
        surviving.append(GeneSet(s.set_id, s.description, restricted))
        memberships.append(np.array(member, dtype=np.intp))
    if not surviving:
        raise DataError(
            f"zero sets survive the min_set_size={min_set_size} filter "
            f"({len(dropped)} dropped)"
        )

    positions = [np.searchsorted(universe, m) for m in memberships]
    return AnalysisBundle(
        matrix=matrix,
        phenotype=phenotype,
        sets=surviving,
        universe=universe,
        memberships=memberships,
        universe_positions=positions,
        dropped_sets=dropped,
    )
