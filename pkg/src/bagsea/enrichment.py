"""Per-set enrichment tests over a universe of scored features.

Two tests are provided. The hypergeometric test collapses each set into a 2x2
overlap table against the significant features and computes the one-sided
over-representation tail. The mean-rank test compares in-set against
out-of-set score ranks (a Wilcoxon rank-sum with the one-sided alternative
"in-set scores are larger"); by convention callers pass absolute statistics so
that enrichment in either direction counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import special, stats

from .dataio import AnalysisBundle

__all__ = [
    "EnrichmentError",
    "EnrichmentResult",
    "hypergeometric_test",
    "wilcoxon_mean_rank_test",
    "enrich_all_sets",
    "write_enrichment_tsv",
]

# Largest small-side size for which the exact rank-sum distribution is used.
EXACT_RANKSUM_LIMIT = 8


class EnrichmentError(ValueError):
    """Inconsistent enrichment inputs (invalid 2x2 table, bad membership)."""


@dataclass
class EnrichmentResult:
    set_id: str
    set_size: int
    overlap: int | None  # significant member features; hypergeometric only
    p_value: float
    method: str  # "hypergeometric" | "wilcoxon"


def _log_choose(n: int, k: int) -> float:
    return float(
        special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)
    )


def hypergeometric_test(
    universe_size: int, set_size: int, significant_total: int, overlap: int
) -> float:
    """One-sided over-representation tail P(X >= overlap).

    X is hypergeometric: ``significant_total`` draws from a universe of
    ``universe_size`` features of which ``set_size`` are set members. Computed
    in log space with the tail accumulated from its smallest term, so 50k-
    feature universes stay in range.
    """
    n_univ, k_set, n_sig, k_obs = universe_size, set_size, significant_total, overlap
    lo = max(0, n_sig + k_set - n_univ)
    hi = min(k_set, n_sig)
    if not (0 <= k_set <= n_univ and 0 <= n_sig <= n_univ and lo <= k_obs <= hi):
        raise EnrichmentError(
            f"inconsistent 2x2 table: N={n_univ}, K={k_set}, n={n_sig}, k={k_obs}"
        )
    if k_obs <= lo:
        return 1.0
    denom = _log_choose(n_univ, n_sig)
    log_terms = [
        _log_choose(k_set, x) + _log_choose(n_univ - k_set, n_sig - x) - denom
        for x in range(k_obs, hi + 1)
    ]
    tail = 0.0
    for lt in sorted(log_terms):
        tail += math.exp(lt)
    return min(1.0, tail)


def _midranks(values: np.ndarray) -> np.ndarray:
    return stats.rankdata(values, method="average")


def _rank_sum_cdf_count(j: int, m: int, u_max: int) -> int:
    """Number of j-subsets of ranks 1..j+m whose shifted rank-sum U is <= u_max.

    Coefficient sums of the Gaussian binomial generating function
    ``prod_{i=1..j} (1 - x^(m+i)) / (1 - x^i)``, evaluated with exact integer
    arithmetic and truncated at ``u_max``.
    """
    if u_max < 0:
        return 0
    poly = [0] * (u_max + 1)
    poly[0] = 1
    for i in range(1, j + 1):
        for u in range(i, u_max + 1):
            poly[u] += poly[u - i]
        off = m + i
        for u in range(u_max, off - 1, -1):
            poly[u] -= poly[u - off]
    return sum(poly)


def _exact_rank_sum_tail(n_in: int, n_out: int, w: float) -> float:
    """P(rank sum of the in-group >= w) for distinct ranks 1..n_in+n_out."""
    total = n_in + n_out
    if n_in > n_out:
        # Mirror to the smaller side: W_in >= w iff W_out <= total_sum - w.
        w = total * (total + 1) / 2 - w
        n_in, n_out = n_out, n_in
        u_obs = int(round(w - n_in * (n_in + 1) / 2))
        count = _rank_sum_cdf_count(n_in, n_out, u_obs)
    else:
        u_obs = int(round(w - n_in * (n_in + 1) / 2))
        span = n_in * n_out
        if span - u_obs <= u_obs - 1:
            # tail is the short side; count it directly via symmetry U ~ span - U
            count = _rank_sum_cdf_count(n_in, n_out, span - u_obs)
        else:
            count = math.comb(total, n_in) - _rank_sum_cdf_count(n_in, n_out, u_obs - 1)
    return float(Fraction(count, math.comb(total, n_in)))


def wilcoxon_mean_rank_test(scores: np.ndarray, membership: np.ndarray) -> float:
    """Rank-sum test of whether in-set scores are systematically larger.

    Scores are midranked ascending (ties share their mean rank). When the
    smaller side has at most ``EXACT_RANKSUM_LIMIT`` members and all scores
    are distinct, the exact permutation distribution of the rank sum is used;
    otherwise a normal approximation with tie-corrected variance and a 0.5
    continuity correction. Callers pass magnitudes (e.g. ``|t|``) for the
    two-directional alternative.
    """
    scores = np.asarray(scores, dtype=np.float64)
    membership = np.asarray(membership, dtype=np.intp)
    n_total = scores.size
    n_in = membership.size
    if n_in == 0 or n_in >= n_total:
        raise EnrichmentError(
            f"membership size {n_in} must be in [1, universe size {n_total})"
        )
    if not np.all(np.isfinite(scores)):
        raise EnrichmentError("scores must be finite")
    n_out = n_total - n_in

    ranks = _midranks(scores)
    w = float(ranks[membership].sum())

    distinct = np.unique(scores).size == n_total
    if min(n_in, n_out) <= EXACT_RANKSUM_LIMIT and distinct:
        return _exact_rank_sum_tail(n_in, n_out, w)

    mean_w = n_in * (n_total + 1) / 2.0
    _, tie_counts = np.unique(scores, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts))
    var_w = n_in * n_out / 12.0 * ((n_total + 1) - tie_term / (n_total * (n_total - 1)))
    if var_w <= 0.0:
        return 1.0
    z = (w - mean_w - 0.5) / math.sqrt(var_w)
    return float(min(1.0, max(0.0, stats.norm.sf(z))))


def enrich_all_sets(
    bundle: AnalysisBundle,
    statistics: np.ndarray,
    significant: np.ndarray,
    method: str,
    signed_scores: bool = False,
) -> list[EnrichmentResult]:
    """Run one enrichment test per surviving set, in collection order.

    ``statistics`` and ``significant`` are per-feature arrays indexed like the
    bundle's matrix rows; only universe features enter the tests. The
    hypergeometric test consumes the significance flags; the mean-rank test
    ranks ``|statistics|`` (or the signed values with ``signed_scores=True``)
    and ignores the flags.
    """
    if method not in ("hypergeometric", "wilcoxon"):
        raise EnrichmentError(f"unknown enrichment method {method!r}")
    statistics = np.asarray(statistics, dtype=np.float64)
    significant = np.asarray(significant, dtype=bool)
    if statistics.shape[0] != bundle.matrix.n_features:
        raise EnrichmentError("statistics are not aligned with the bundle's features")

    universe = bundle.universe
    results: list[EnrichmentResult] = []
    if method == "hypergeometric":
        n_universe = int(universe.size)
        n_significant = int(significant[universe].sum())
        for s, member in zip(bundle.sets, bundle.memberships):
            overlap = int(significant[member].sum())
            p = hypergeometric_test(n_universe, member.size, n_significant, overlap)
            results.append(EnrichmentResult(s.set_id, member.size, overlap, p, method))
    else:
        scores = statistics[universe] if signed_scores else np.abs(statistics[universe])
        for s, member, positions in zip(
            bundle.sets, bundle.memberships, bundle.universe_positions
        ):
            p = wilcoxon_mean_rank_test(scores, positions)
            results.append(EnrichmentResult(s.set_id, member.size, None, p, method))
    return results


def write_enrichment_tsv(results: list[EnrichmentResult], path) -> None:
    """Export set-level results as TSV: set_id, size, overlap, p, method."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("set_id\tsize\toverlap\tp_value\tmethod\n")
        for r in results:
            overlap = "" if r.overlap is None else str(r.overlap)
            fh.write(f"{r.set_id}\t{r.set_size}\t{overlap}\t{r.p_value!r}\t{r.method}\n")
