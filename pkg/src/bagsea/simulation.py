"""Spike-in simulations validating the replication probability estimate.

Synthetic datasets follow an additive model: every measurement is Gaussian
noise, plus a per-gene effect times the outcome indicator for genes selected
to carry signal. Two experiments are built on top:

* Experiment 1 generates many datasets from one fixed design and checks that
  a set's mean replication probability tracks the frequency with which the
  set is observed significant across the repeated datasets.
* Experiment 2 generates pairs of independent datasets sharing only the
  spiked genes and compares, across pairs, how well replication probabilities
  versus p-values correlate between the paired datasets.

A bootstrap-versus-posterior demonstration for a simple normal mean is
included as well (see :func:`bootstrap_posterior_demo`).
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources

import numpy as np
from scipy import stats

from .bagging import BaggingConfig, BaggingResult, run_bagging
from .dataio import (
    AnalysisBundle,
    ExpressionMatrix,
    GeneSet,
    GeneSetCollection,
    PhenotypeTable,
)

__all__ = [
    "SimulationError",
    "SimulationSpec",
    "SpikeDesign",
    "SimulatedDataset",
    "spike_in_dataset",
    "sample_design",
    "generate_dataset",
    "run_simulation1",
    "run_simulation2",
    "Simulation1Result",
    "Simulation2Result",
    "spearman",
    "bootstrap_posterior_demo",
    "PosteriorDemoResult",
    "load_fixture_collection",
]

FIXTURE_GMT = "go_fixture_v1.gmt"

# Substream tags under the master seed: design sampling, dataset noise,
# per-dataset bagging seeds.
_DESIGN_STREAM = 0
_DATA_STREAM = 1
_BAGGING_STREAM = 2


class SimulationError(ValueError):
    """Infeasible simulation specification or undefined summary."""


@dataclass(frozen=True)
class SimulationSpec:
    """Spike-in design parameters.

    ``n_sets`` sets are sampled from a collection and their gene union forms
    the simulated universe (one feature per gene); ``n_spiked_genes`` of those
    genes receive an effect drawn from N(beta_mean, beta_sd^2); every
    measurement carries N(noise_mean, noise_sd^2) noise.
    """

    n_sets: int
    n_spiked_genes: int
    n_cases: int
    n_controls: int
    noise_mean: float = 6.0
    noise_sd: float = 1.0
    beta_mean: float = 1.0
    beta_sd: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_sets < 1:
            raise SimulationError(f"n_sets must be >= 1, got {self.n_sets}")
        if self.n_spiked_genes < 0:
            raise SimulationError("n_spiked_genes must be >= 0")
        if self.n_cases < 2 or self.n_controls < 2:
            raise SimulationError("need at least 2 cases and 2 controls")
        if not self.noise_sd > 0:
            raise SimulationError("noise_sd must be positive")
        if self.beta_sd < 0:
            raise SimulationError("beta_sd must be non-negative")


@dataclass(frozen=True)
class SpikeDesign:
    """Fixed ground truth shared by repeated datasets: the sampled sets, the
    gene universe (sorted union of their genes), and which genes carry signal."""

    sets: tuple[GeneSet, ...]
    genes: tuple[str, ...]
    spiked_genes: frozenset[str]


@dataclass
class SimulatedDataset:
    bundle: AnalysisBundle
    spiked_genes: frozenset[str]
    spike_fraction: np.ndarray  # per set: fraction of member genes carrying signal


def load_fixture_collection() -> GeneSetCollection:
    """The bundled 100-set synthetic collection used as the default design."""
    from . import dataio

    path = resources.files("bagsea").joinpath("data", FIXTURE_GMT)
    with resources.as_file(path) as p:
        return dataio.parse_gmt(p)


def sample_design(
    collection: GeneSetCollection, spec: SimulationSpec, rng: np.random.Generator
) -> SpikeDesign:
    """Sample the sets and the spiked genes that define one simulated truth."""
    if spec.n_sets > len(collection.sets):
        raise SimulationError(
            f"cannot sample {spec.n_sets} sets from a collection of {len(collection.sets)}"
        )
    chosen = sorted(rng.choice(len(collection.sets), size=spec.n_sets, replace=False))
    sets = tuple(collection.sets[i] for i in chosen)
    genes = sorted(set().union(*(s.gene_ids for s in sets)))
    if spec.n_spiked_genes > len(genes):
        raise SimulationError(
            f"cannot spike {spec.n_spiked_genes} genes in a universe of {len(genes)}"
        )
    spiked = frozenset(
        rng.choice(np.array(genes, dtype=object), size=spec.n_spiked_genes, replace=False)
    )
    return SpikeDesign(sets=sets, genes=tuple(genes), spiked_genes=spiked)


def generate_dataset(
    design: SpikeDesign, spec: SimulationSpec, rng: np.random.Generator
) -> SimulatedDataset:
    """Draw one dataset from a design: fresh per-gene effects, fresh noise."""
    genes = list(design.genes)
    n_genes = len(genes)
    n = spec.n_controls + spec.n_cases
    gene_index = {g: i for i, g in enumerate(genes)}

    beta = np.zeros(n_genes)
    spiked_rows = np.array(sorted(gene_index[g] for g in design.spiked_genes), dtype=np.intp)
    if spiked_rows.size:
        beta[spiked_rows] = rng.normal(spec.beta_mean, spec.beta_sd, spiked_rows.size)

    z = np.concatenate(
        [np.zeros(spec.n_controls, dtype=np.int8), np.ones(spec.n_cases, dtype=np.int8)]
    )
    values = beta[:, None] * z[None, :] + rng.normal(spec.noise_mean, spec.noise_sd, (n_genes, n))

    sample_ids = [f"ctrl{j:03d}" for j in range(spec.n_controls)] + [
        f"trt{j:03d}" for j in range(spec.n_cases)
    ]
    matrix = ExpressionMatrix(feature_ids=genes, sample_ids=sample_ids, values=values)
    phenotype = PhenotypeTable(
        sample_ids=sample_ids, z=z, group_names=("ctrl", "trt"), covariates={}
    )

    memberships = [
        np.array(sorted(gene_index[g] for g in s.gene_ids), dtype=np.intp)
        for s in design.sets
    ]
    universe = np.arange(n_genes, dtype=np.intp)
    bundle = AnalysisBundle(
        matrix=matrix,
        phenotype=phenotype,
        sets=list(design.sets),
        universe=universe,
        memberships=memberships,
        universe_positions=memberships,
    )
    spike_fraction = np.array(
        [len(s.gene_ids & design.spiked_genes) / len(s.gene_ids) for s in design.sets]
    )
    return SimulatedDataset(
        bundle=bundle, spiked_genes=design.spiked_genes, spike_fraction=spike_fraction
    )


def spike_in_dataset(
    collection: GeneSetCollection, spec: SimulationSpec, rng: np.random.Generator
) -> SimulatedDataset:
    """Sample a design and draw one dataset from it in a single call."""
    design = sample_design(collection, spec, rng)
    return generate_dataset(design, spec, rng)


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Rank correlation: Pearson correlation of midranks."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise SimulationError("inputs must be 1-d vectors of equal length")
    if x.size < 2:
        raise SimulationError("need at least 2 observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise SimulationError("rank correlation is undefined for a constant vector")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float(np.dot(rx, ry) / math.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


def _bagging_seed(master_seed: int, *path: int) -> int:
    seq = np.random.SeedSequence((master_seed, _BAGGING_STREAM, *path))
    return int(seq.generate_state(1, np.uint64)[0])


@dataclass
class Simulation1Result:
    """Per-set significance frequency and mean replication probability across
    repeated datasets from one design, plus their rank correlation."""

    set_ids: list[str]
    spike_fraction: np.ndarray
    frequency: dict[str, np.ndarray]
    mean_r_hat: dict[str, np.ndarray]
    correlation: dict[str, float]
    n_datasets: int


def _dataset_pass(
    design: SpikeDesign, spec: SimulationSpec, config: BaggingConfig, *path: int
) -> tuple[BaggingResult, SimulatedDataset]:
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, _DATA_STREAM, *path)))
    dataset = generate_dataset(design, spec, rng)
    cfg = replace(
        config, seed=_bagging_seed(spec.seed, *path), threads=1, keep_p_matrix=False
    )
    return run_bagging(dataset.bundle, cfg), dataset


def run_simulation1(
    spec: SimulationSpec,
    n_datasets: int,
    config: BaggingConfig,
    collection: GeneSetCollection | None = None,
    threads: int = 1,
) -> Simulation1Result:
    """Repeated-study experiment: does mean r-hat track significance frequency?

    One design is sampled, then ``n_datasets`` datasets are drawn from it
    independently; each gets the full pipeline plus bagging. Per set and per
    enrichment method this aggregates the share of datasets with an observed
    p below alpha and the mean replication probability, and reports the
    rank correlation between the two.
    """
    if n_datasets < 2:
        raise SimulationError("need at least 2 datasets for a correlation")
    if collection is None:
        collection = load_fixture_collection()
    design = sample_design(
        collection, spec, np.random.default_rng(np.random.SeedSequence((spec.seed, _DESIGN_STREAM)))
    )

    def one(d: int) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        result, _ = _dataset_pass(design, spec, config, d)
        sig = {m: (result.p_observed[m] < config.alpha).astype(np.float64) for m in config.methods}
        return sig, result.r_hat

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            passes = list(pool.map(one, range(n_datasets)))
    else:
        passes = [one(d) for d in range(n_datasets)]

    frequency = {
        m: np.mean([sig[m] for sig, _ in passes], axis=0) for m in config.methods
    }
    mean_r_hat = {
        m: np.mean([rh[m] for _, rh in passes], axis=0) for m in config.methods
    }
    correlation = {m: spearman(frequency[m], mean_r_hat[m]) for m in config.methods}

    first = generate_dataset(design, spec, np.random.default_rng(0))
    return Simulation1Result(
        set_ids=[s.set_id for s in design.sets],
        spike_fraction=first.spike_fraction,
        frequency=frequency,
        mean_r_hat=mean_r_hat,
        correlation=correlation,
        n_datasets=n_datasets,
    )


@dataclass
class Simulation2Result:
    """Between-dataset correlations across independently generated pairs.

    For each method, arrays over pairs of Spearman correlations between the
    two datasets' replication probabilities and between their p-values, on
    all sets (``*_all``) and on the sets significant in at least one dataset
    of the pair (``*_significant``). Entries are NaN when a correlation was
    undefined (empty or constant subset); medians ignore NaNs.
    """

    n_pairs: int
    rho_r_all: dict[str, np.ndarray]
    rho_p_all: dict[str, np.ndarray]
    rho_r_significant: dict[str, np.ndarray]
    rho_p_significant: dict[str, np.ndarray]
    medians: dict[str, dict[str, float]] = field(default_factory=dict)

    def compute_medians(self) -> None:
        self.medians = {}
        for m in self.rho_r_all:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                self.medians[m] = {
                    "r_hat_all": float(np.nanmedian(self.rho_r_all[m])),
                    "p_all": float(np.nanmedian(self.rho_p_all[m])),
                    "r_hat_significant": float(np.nanmedian(self.rho_r_significant[m])),
                    "p_significant": float(np.nanmedian(self.rho_p_significant[m])),
                }


def _safe_spearman(x: np.ndarray, y: np.ndarray) -> float:
    try:
        return spearman(x, y)
    except SimulationError:
        return math.nan


def run_simulation2(
    spec: SimulationSpec,
    n_pairs: int,
    config: BaggingConfig,
    collection: GeneSetCollection | None = None,
    threads: int = 1,
) -> Simulation2Result:
    """Independent-replication experiment over paired datasets.

    Each pair shares a freshly sampled design (sets and spiked genes) but the
    two datasets draw their own effects and noise. Both datasets get the full
    pipeline plus bagging; per pair this records rank correlations between
    the paired replication probabilities and between the paired p-values,
    over all sets and over the sets with min(p1, p2) below alpha. A pair
    whose subset is empty or degenerate contributes NaN for that statistic.
    """
    if n_pairs < 1:
        raise SimulationError("need at least 1 pair")
    if collection is None:
        collection = load_fixture_collection()

    def one(i: int) -> dict[str, tuple[float, float, float, float]]:
        design = sample_design(
            collection,
            spec,
            np.random.default_rng(np.random.SeedSequence((spec.seed, _DESIGN_STREAM, i))),
        )
        res1, _ = _dataset_pass(design, spec, config, i, 0)
        res2, _ = _dataset_pass(design, spec, config, i, 1)
        out: dict[str, tuple[float, float, float, float]] = {}
        for m in config.methods:
            p1, p2 = res1.p_observed[m], res2.p_observed[m]
            r1, r2 = res1.r_hat[m], res2.r_hat[m]
            keep = np.minimum(p1, p2) < config.alpha
            if keep.sum() >= 2:
                rho_r_sig = _safe_spearman(r1[keep], r2[keep])
                rho_p_sig = _safe_spearman(p1[keep], p2[keep])
            else:
                rho_r_sig = rho_p_sig = math.nan
            out[m] = (
                _safe_spearman(r1, r2),
                _safe_spearman(p1, p2),
                rho_r_sig,
                rho_p_sig,
            )
        return out

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_pair = list(pool.map(one, range(n_pairs)))
    else:
        per_pair = [one(i) for i in range(n_pairs)]

    result = Simulation2Result(
        n_pairs=n_pairs,
        rho_r_all={m: np.array([pp[m][0] for pp in per_pair]) for m in config.methods},
        rho_p_all={m: np.array([pp[m][1] for pp in per_pair]) for m in config.methods},
        rho_r_significant={m: np.array([pp[m][2] for pp in per_pair]) for m in config.methods},
        rho_p_significant={m: np.array([pp[m][3] for pp in per_pair]) for m in config.methods},
    )
    result.compute_medians()
    return result


@dataclass
class PosteriorDemoResult:
    """Bootstrap means against the plug-in normal for a sample mean.

    ``posterior_variance`` is the plug-in value s^2/n with s^2 the 1/n sample
    variance. Note the caveat: under a flat (Jeffreys-style) prior the exact
    posterior for the mean has *inflated* variance relative to this plug-in
    normal, because the variance is itself uncertain; the bootstrap-mean cloud
    approximates that posterior only to first order, and its quantiles should
    not be read as frequentist significance levels.
    """

    bootstrap_means: np.ndarray
    posterior_mean: float
    posterior_variance: float
    ks_distance: float


def bootstrap_posterior_demo(
    z: np.ndarray, n_boot: int, rng: np.random.Generator
) -> PosteriorDemoResult:
    """Plain bootstrap of a sample mean, compared to its plug-in normal law.

    Draws ``n_boot`` unstratified resamples of ``z``, records each mean, and
    reports the Kolmogorov-Smirnov distance between the empirical bootstrap
    distribution and N(mean(z), s^2/n). See :class:`PosteriorDemoResult` for
    the variance-inflation caveat. A constant input makes the reference law a
    point mass; the distance is then reported as 1 with a warning.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size < 5:
        raise SimulationError("need a 1-d sample of at least 5 observations")
    if n_boot < 100:
        raise SimulationError("need at least 100 bootstrap draws")
    n = z.size
    means = z[rng.integers(0, n, (n_boot, n))].mean(axis=1)
    z_bar = float(z.mean())
    s2 = float(np.mean((z - z_bar) ** 2))
    var_mean = s2 / n
    if var_mean == 0.0:
        warnings.warn(
            "constant sample: reference distribution is a point mass, KS distance set to 1",
            stacklevel=2,
        )
        return PosteriorDemoResult(means, z_bar, 0.0, 1.0)

    ordered = np.sort(means)
    cdf = stats.norm.cdf(ordered, loc=z_bar, scale=math.sqrt(var_mean))
    grid = np.arange(1, n_boot + 1) / n_boot
    ks = float(np.max(np.maximum(grid - cdf, cdf - (grid - 1.0 / n_boot))))
    return PosteriorDemoResult(means, z_bar, var_mean, ks)
