"""Per-feature differential testing with empirical-Bayes variance moderation.

The model is ordinary least squares per feature, ``y_i = b0 + b1*z + B*covariates
+ e``, with the group coefficient ``b1`` as the effect of interest. Residual
variances are shrunk toward a pooled prior by moment matching on the log scale,
and moderated t-statistics are referred to a Student-t with inflated degrees of
freedom. P-values convert to q-values by the step-up false discovery rate
procedure with a point estimate of the null proportion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .dataio import AnalysisBundle, PhenotypeTable

__all__ = [
    "DesignError",
    "ModerationError",
    "ModerationParams",
    "LinearFit",
    "DifferentialResult",
    "build_design",
    "fit_linear_per_feature",
    "fit_moderation",
    "moderated_t",
    "qvalues",
    "differential_analysis",
    "write_differential_tsv",
]


class DesignError(ValueError):
    """The design matrix cannot support the requested fit."""


class ModerationError(ValueError):
    """The variance prior cannot be estimated from the given variances."""


@dataclass(frozen=True)
class ModerationParams:
    """Variance prior: ``d0`` prior degrees of freedom (may be ``inf``) and
    ``s0_sq`` prior variance. ``d0 = 0`` is the no-shrinkage degenerate case,
    accepted by :func:`moderated_t` but never produced by :func:`fit_moderation`."""

    d0: float
    s0_sq: float

    def __post_init__(self) -> None:
        if not (self.d0 >= 0.0):
            raise ModerationError(f"prior degrees of freedom must be >= 0, got {self.d0}")
        if self.d0 > 0.0 and not (self.s0_sq > 0.0 and math.isfinite(self.s0_sq)):
            raise ModerationError(f"prior variance must be finite positive, got {self.s0_sq}")


@dataclass
class LinearFit:
    """Per-feature OLS summaries: group effect, its design-dependent scale
    ``stdev_unscaled = sqrt((X'X)^-1 [group, group])``, residual variance, and
    the common residual degrees of freedom."""

    effect: np.ndarray
    stdev_unscaled: float
    sigma2: np.ndarray
    df_residual: float


@dataclass
class DifferentialResult:
    feature_ids: list[str]
    effect: np.ndarray
    stdev_unscaled: float
    sigma2: np.ndarray
    df_residual: float
    params: ModerationParams
    t_moderated: np.ndarray
    df_total: float
    p_value: np.ndarray
    q_value: np.ndarray
    degenerate: np.ndarray  # bool: features with zero posterior standard error


def build_design(phenotype: PhenotypeTable) -> np.ndarray:
    """Design matrix with columns [intercept, group, covariates...]."""
    cols = [np.ones(phenotype.n_samples), phenotype.z.astype(np.float64)]
    cols.extend(phenotype.covariates.values())
    return np.column_stack(cols)


def fit_linear_per_feature(values: np.ndarray, design: np.ndarray) -> LinearFit:
    """Ordinary least squares for every matrix row against a shared design.

    The effect is the coefficient of the group column (column 1);
    ``sigma2 = RSS / df_residual`` with ``df_residual = n - n_columns``.
    Rows that are exactly constant get effect 0 and sigma2 0.

    Raises :class:`DesignError` on a rank-deficient design or when no residual
    degrees of freedom remain.
    """
    n, k = design.shape
    if values.ndim != 2 or values.shape[1] != n:
        raise DesignError(
            f"values has {values.shape[1] if values.ndim == 2 else '?'} columns, design has {n} rows"
        )
    df_residual = n - k
    if df_residual <= 0:
        raise DesignError(f"no residual degrees of freedom: {n} samples, {k} model columns")
    if np.linalg.matrix_rank(design) < k:
        raise DesignError("design matrix is rank deficient")

    q, r = np.linalg.qr(design)
    coef = np.linalg.solve(r, q.T @ values.T)  # (k, n_features)
    residuals = values.T - design @ coef
    rss = np.einsum("ij,ij->j", residuals, residuals)

    r_inv = np.linalg.inv(r)
    xtx_inv_diag = np.sum(r_inv * r_inv, axis=1)
    stdev_unscaled = float(np.sqrt(xtx_inv_diag[1]))

    effect = coef[1].copy()
    sigma2 = rss / df_residual
    constant = values.min(axis=1) == values.max(axis=1)
    if constant.any():
        effect[constant] = 0.0
        sigma2[constant] = 0.0
    return LinearFit(
        effect=effect,
        stdev_unscaled=stdev_unscaled,
        sigma2=sigma2,
        df_residual=float(df_residual),
    )


def _trigamma(x: float) -> float:
    return float(special.polygamma(1, x))


def _trigamma_inverse(y: float, lo: float = 1e-6, hi: float = 1e6, tol: float = 1e-8) -> float | None:
    """Solve trigamma(x) = y for x by bisection on (lo, hi).

    trigamma is strictly decreasing on the positive axis; a target outside the
    bracket's value range returns None.
    """
    if not (_trigamma(hi) <= y <= _trigamma(lo)):
        return None
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _trigamma(mid) > y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fit_moderation(sigma2: np.ndarray, df_residual: float) -> ModerationParams:
    """Estimate the variance prior by moment matching on log residual variances.

    With ``e_i = log(s_i^2) - digamma(df/2) + log(df/2)`` over the strictly
    positive variances, solve ``trigamma(d0/2) = var(e) - trigamma(df/2)``;
    then ``s0_sq = exp(mean(e) + digamma(d0/2) - log(d0/2))``. When the
    trigamma equation has no positive solution the prior is a point mass:
    ``d0 = inf`` and ``s0_sq`` is the mean of the usable variances.

    Requires at least 3 strictly positive variances (zero variances carry no
    information and are excluded).
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if not df_residual > 0:
        raise ModerationError(f"residual degrees of freedom must be positive, got {df_residual}")
    usable = sigma2[sigma2 > 0]
    if usable.size < 3:
        raise ModerationError(
            f"need at least 3 strictly positive variances, got {usable.size}"
        )
    half_df = df_residual / 2.0
    e = np.log(usable) - special.digamma(half_df) + math.log(half_df)
    e_mean = float(e.mean())
    n = usable.size
    e_var = float(np.sum((e - e_mean) ** 2) / (n - 1)) - _trigamma(half_df)

    half_d0 = _trigamma_inverse(e_var) if e_var > 0 else None
    if half_d0 is None:
        return ModerationParams(d0=math.inf, s0_sq=float(usable.mean()))
    d0 = 2.0 * half_d0
    s0_sq = math.exp(e_mean + special.digamma(half_d0) - math.log(half_d0))
    return ModerationParams(d0=d0, s0_sq=s0_sq)


def moderated_t(
    effect: np.ndarray,
    stdev_unscaled: float,
    sigma2: np.ndarray,
    df_residual: float,
    params: ModerationParams,
) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Moderated t-statistics against the shrunken variance.

    Posterior variance is ``(d0*s0_sq + df*sigma2) / (d0 + df)`` (just
    ``s0_sq`` when d0 is infinite), ``t = effect / (s_post * stdev_unscaled)``,
    and the two-sided p-value is referred to Student-t with ``d0 + df`` degrees
    of freedom. Features with a zero posterior standard error are flagged
    degenerate and get t = 0, p = 1; they stay in the result so the universe
    keeps its size.

    Returns ``(t, df_total, p, degenerate)``.
    """
    effect = np.asarray(effect, dtype=np.float64)
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if math.isinf(params.d0):
        s2_post = np.full_like(sigma2, params.s0_sq)
        df_total = math.inf
    else:
        s2_post = (params.d0 * params.s0_sq + df_residual * sigma2) / (params.d0 + df_residual)
        df_total = params.d0 + df_residual

    denom = np.sqrt(s2_post) * stdev_unscaled
    degenerate = denom == 0.0
    t = np.zeros_like(effect)
    np.divide(effect, denom, out=t, where=~degenerate)
    if math.isinf(df_total):
        p = 2.0 * stats.norm.sf(np.abs(t))
    else:
        p = 2.0 * stats.t.sf(np.abs(t), df=df_total)
    p[degenerate] = 1.0
    return t, df_total, p, degenerate


def qvalues(p: np.ndarray, lam: float = 0.5, pi0: float | None = None) -> np.ndarray:
    """Step-up q-values with a point estimate of the null proportion.

    ``pi0`` defaults to ``min(1, #{p > lam} / (m * (1 - lam)))``; pass an
    explicit value to override the estimate. q for the i-th smallest p is
    ``min over j >= i of pi0 * m * p_(j) / j``, mapped back to input order and
    clamped to [0, 1].
    """
    p = np.asarray(p, dtype=np.float64)
    if p.size == 0:
        raise ValueError("cannot compute q-values for an empty p-value vector")
    if np.any((p < 0) | (p > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    if not 0 < lam < 1:
        raise ValueError(f"lambda must lie in (0, 1), got {lam}")
    m = p.size
    if pi0 is None:
        pi0 = min(1.0, float(np.sum(p > lam)) / (m * (1.0 - lam)))

    order = np.argsort(p, kind="stable")
    ranked = pi0 * m * p[order] / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(ranked[::-1])[::-1]
    q = np.empty(m, dtype=np.float64)
    q[order] = np.clip(q_sorted, 0.0, 1.0)
    return q


def differential_analysis(bundle: AnalysisBundle, lam: float = 0.5) -> DifferentialResult:
    """Full per-feature pipeline: OLS, variance moderation, moderated t, q-values."""
    design = build_design(bundle.phenotype)
    fit = fit_linear_per_feature(bundle.matrix.values, design)
    params = fit_moderation(fit.sigma2, fit.df_residual)
    t, df_total, p, degenerate = moderated_t(
        fit.effect, fit.stdev_unscaled, fit.sigma2, fit.df_residual, params
    )
    q = qvalues(p, lam=lam)
    return DifferentialResult(
        feature_ids=bundle.matrix.feature_ids,
        effect=fit.effect,
        stdev_unscaled=fit.stdev_unscaled,
        sigma2=fit.sigma2,
        df_residual=fit.df_residual,
        params=params,
        t_moderated=t,
        df_total=df_total,
        p_value=p,
        q_value=q,
        degenerate=degenerate,
    )


def write_differential_tsv(result: DifferentialResult, path) -> None:
    """Export per-feature results as TSV: feature_id, effect, t, df, p, q."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("feature_id\teffect\tt\tdf\tp\tq\n")
        for i, fid in enumerate(result.feature_ids):
            fh.write(
                f"{fid}\t{result.effect[i]!r}\t{result.t_moderated[i]!r}\t"
                f"{result.df_total!r}\t{result.p_value[i]!r}\t{result.q_value[i]!r}\n"
            )
