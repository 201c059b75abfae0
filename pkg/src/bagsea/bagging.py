"""Stratified bootstrap bagging of the differential + enrichment pipeline.

The procedure: (1) test every feature on the full data, (2) score every set,
(3) for each of B iterations resample the samples with replacement within each
outcome group, rerun the whole pipeline, and record each set's bootstrap
p-value, (4) report per set the fraction of iterations whose p-value fell
below alpha -- the estimated probability the set would come out significant
in a repeated study.

Every iteration draws from its own deterministic substream keyed on
(master seed, iteration, attempt), so results are bit-identical no matter how
iterations are scheduled across threads.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffexpr, enrichment
from .dataio import AnalysisBundle

__all__ = [
    "BaggingError",
    "BaggingConfig",
    "BaggingResult",
    "stratified_resample_indices",
    "replication_probability",
    "run_bagging",
    "stability_label",
    "write_bagging_tsv",
    "write_p_matrix_json",
]

METHOD_KEYS = {"hypergeometric": "hyper", "wilcoxon": "wilcox"}
MAX_REDRAWS = 10

_STABILITY_GRID = {
    True: [
        "very inconsistent",
        "very inconsistent",
        "inconsistent",
        "somewhat consistent",
        "very consistent",
    ],
    False: [
        "very consistent",
        "somewhat consistent",
        "inconsistent",
        "very inconsistent",
        "very inconsistent",
    ],
}


class BaggingError(RuntimeError):
    """The bagging procedure could not complete (e.g. unusable replicates)."""


@dataclass(frozen=True)
class BaggingConfig:
    """Knobs of the bagging run.

    ``alpha`` is the set-level significance threshold counted by the
    replication probability; ``alpha_gene`` is the per-feature threshold that
    feeds the hypergeometric 2x2 table, applied to raw p-values or q-values
    per ``gene_criterion``.
    """

    B: int = 100
    alpha: float = 0.05
    alpha_gene: float = 0.05
    method: str = "both"  # "hypergeometric" | "wilcoxon" | "both"
    gene_criterion: str = "raw_p"  # "raw_p" | "q_value"
    seed: int = 0
    threads: int = 1
    keep_p_matrix: bool = False
    signed_scores: bool = False

    def __post_init__(self) -> None:
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        for name in ("alpha", "alpha_gene"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if self.method not in ("hypergeometric", "wilcoxon", "both"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.gene_criterion not in ("raw_p", "q_value"):
            raise ValueError(f"unknown gene criterion {self.gene_criterion!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")

    @property
    def methods(self) -> list[str]:
        if self.method == "both":
            return ["hypergeometric", "wilcoxon"]
        return [self.method]


@dataclass
class BaggingResult:
    """Observed p-values, replication probabilities, and diagnostics per set.

    Dict values are keyed by method name; ``p_matrix`` is retained only when
    the config asks for it (it is L x B floats). ``degenerate_counts[b]`` is
    the number of zero-variance features in iteration b.
    """

    set_ids: list[str]
    set_sizes: np.ndarray
    config: BaggingConfig
    p_observed: dict[str, np.ndarray]
    q_observed: dict[str, np.ndarray]
    r_hat: dict[str, np.ndarray]
    p_matrix: dict[str, np.ndarray] | None
    degenerate_counts: np.ndarray
    redraw_count: int = 0


def stratified_resample_indices(
    group_assignment: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Resample sample indices with replacement within each outcome group.

    Position j of the output is a draw from j's own group, so the group
    layout (and the design's group column) is preserved exactly.
    """
    group_assignment = np.asarray(group_assignment)
    out = np.empty(group_assignment.size, dtype=np.intp)
    for g in np.unique(group_assignment):
        positions = np.flatnonzero(group_assignment == g)
        out[positions] = positions[rng.integers(0, positions.size, positions.size)]
    return out


def replication_probability(p_matrix: np.ndarray, alpha: float) -> np.ndarray:
    """Fraction of bootstrap p-values strictly below alpha, per set (row)."""
    p_matrix = np.asarray(p_matrix, dtype=np.float64)
    if p_matrix.size == 0:
        raise ValueError("empty bootstrap p-value matrix")
    if p_matrix.ndim != 2:
        raise ValueError(f"expected an L x B matrix, got shape {p_matrix.shape}")
    b = p_matrix.shape[1]
    return (p_matrix < alpha).sum(axis=1) / b


def _iteration_rng(seed: int, iteration: int, attempt: int) -> np.random.Generator:
    # Substream keyed on (seed, iteration, attempt): parallel scheduling cannot
    # reorder randomness, and redraws advance the attempt counter only.
    return np.random.default_rng(np.random.SeedSequence((seed, iteration, attempt)))


def _set_pvalues(
    bundle: AnalysisBundle,
    values: np.ndarray,
    design: np.ndarray,
    config: BaggingConfig,
) -> tuple[dict[str, np.ndarray], int]:
    """One full pipeline pass: per-feature tests, then per-set p-values."""
    fit = diffexpr.fit_linear_per_feature(values, design)
    params = diffexpr.fit_moderation(fit.sigma2, fit.df_residual)
    t, _, p, _ = diffexpr.moderated_t(
        fit.effect, fit.stdev_unscaled, fit.sigma2, fit.df_residual, params
    )
    if config.gene_criterion == "q_value":
        significant = diffexpr.qvalues(p) < config.alpha_gene
    else:
        significant = p < config.alpha_gene

    per_method: dict[str, np.ndarray] = {}
    for method in config.methods:
        results = enrichment.enrich_all_sets(
            bundle, t, significant, method, signed_scores=config.signed_scores
        )
        per_method[method] = np.array([r.p_value for r in results], dtype=np.float64)
    return per_method, int(np.sum(fit.sigma2 == 0.0))


def _bootstrap_iteration(
    bundle: AnalysisBundle,
    design: np.ndarray,
    config: BaggingConfig,
    iteration: int,
) -> tuple[dict[str, np.ndarray], int, int]:
    """Run one resampled pipeline pass, redrawing degenerate replicates.

    A replicate is degenerate when its design goes rank deficient (a resampled
    covariate collapsing to a constant) or too few features keep a positive
    residual variance for moderation. Such replicates are redrawn from the
    next attempt substream so B stays fixed.
    """
    values = bundle.matrix.values
    z = bundle.phenotype.z
    for attempt in range(MAX_REDRAWS):
        rng = _iteration_rng(config.seed, iteration, attempt)
        indices = stratified_resample_indices(z, rng)
        design_b = design[indices]
        try:
            per_method, n_degenerate = _set_pvalues(
                bundle, values[:, indices], design_b, config
            )
        except (diffexpr.DesignError, diffexpr.ModerationError):
            continue
        return per_method, n_degenerate, attempt
    raise BaggingError(
        f"bootstrap iteration {iteration} drew {MAX_REDRAWS} degenerate replicates in a row"
    )


def run_bagging(bundle: AnalysisBundle, config: BaggingConfig) -> BaggingResult:
    """Full-data pass plus B stratified bootstrap passes, aggregated per set.

    Iterations are independent and run on up to ``config.threads`` workers;
    the result does not depend on scheduling.
    """
    if not bundle.sets:
        raise BaggingError("bundle has no surviving gene sets")
    design = diffexpr.build_design(bundle.phenotype)
    p_observed, _ = _set_pvalues(bundle, bundle.matrix.values, design, config)

    n_sets = len(bundle.sets)
    p_matrix = {m: np.empty((n_sets, config.B)) for m in config.methods}
    degenerate_counts = np.zeros(config.B, dtype=np.int64)
    redraw_total = 0

    def task(b: int) -> tuple[int, dict[str, np.ndarray], int, int]:
        per_method, n_degen, attempt = _bootstrap_iteration(bundle, design, config, b)
        return b, per_method, n_degen, attempt

    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(task, range(config.B)))
    else:
        outcomes = [task(b) for b in range(config.B)]
    for b, per_method, n_degen, attempt in outcomes:
        for method, p in per_method.items():
            p_matrix[method][:, b] = p
        degenerate_counts[b] = n_degen
        redraw_total += attempt

    r_hat = {m: replication_probability(p_matrix[m], config.alpha) for m in config.methods}
    q_observed = {m: diffexpr.qvalues(p) for m, p in p_observed.items()}
    return BaggingResult(
        set_ids=bundle.set_ids,
        set_sizes=bundle.set_sizes,
        config=config,
        p_observed=p_observed,
        q_observed=q_observed,
        r_hat=r_hat,
        p_matrix=p_matrix if config.keep_p_matrix else None,
        degenerate_counts=degenerate_counts,
        redraw_count=redraw_total,
    )


def stability_label(p_observed: float, r_hat: float, alpha: float) -> str:
    """Consistency label for a set, from the (significant?, replication bin) grid.

    Replication probabilities bin to the nearest of {0, 0.25, 0.5, 0.75, 1}.
    A significant set that never replicates is "very inconsistent"; a
    non-significant set that never replicates is "very consistent", and so on.
    """
    if not (0.0 <= r_hat <= 1.0):
        raise ValueError(f"replication probability out of range: {r_hat}")
    bin_index = min(4, int(math.floor(r_hat * 4.0 + 0.5)))
    return _STABILITY_GRID[p_observed < alpha][bin_index]


def write_bagging_tsv(result: BaggingResult, path) -> None:
    """Export the bagging summary as TSV.

    Columns: set_id, set_size, then p_observed_<m>, q_set_<m>, r_hat_<m> for
    each configured method (hyper/wilcox), then B and alpha.
    """
    keys = [METHOD_KEYS[m] for m in result.config.methods]
    header = ["set_id", "set_size"]
    for method, key in zip(result.config.methods, keys):
        header += [f"p_observed_{key}", f"q_set_{key}", f"r_hat_{key}"]
    header += ["B", "alpha"]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(header) + "\n")
        for i, set_id in enumerate(result.set_ids):
            row = [set_id, str(int(result.set_sizes[i]))]
            for method in result.config.methods:
                row += [
                    repr(float(result.p_observed[method][i])),
                    repr(float(result.q_observed[method][i])),
                    repr(float(result.r_hat[method][i])),
                ]
            row += [str(result.config.B), repr(float(result.config.alpha))]
            fh.write("\t".join(row) + "\n")


def write_p_matrix_json(result: BaggingResult, path) -> None:
    """Dump the full bootstrap p-value matrices plus stability labels as JSON."""
    if result.p_matrix is None:
        raise BaggingError("p_matrix was not retained; rerun with keep_p_matrix=True")
    payload = {
        "B": result.config.B,
        "alpha": result.config.alpha,
        "set_ids": result.set_ids,
        "p_matrix": {m: mat.tolist() for m, mat in result.p_matrix.items()},
        "stability": {
            m: [
                stability_label(
                    float(result.p_observed[m][i]),
                    float(result.r_hat[m][i]),
                    result.config.alpha,
                )
                for i in range(len(result.set_ids))
            ]
            for m in result.config.methods
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
