"""Uncertainty quantification: stratified bootstrap and Rubin-style pooling.

The bootstrap resamples subjects with replacement within each arm (keeping
n0 and n1 fixed), reruns the entire imputation-and-estimation pipeline on
every resample, and reads the standard error off the replicate spread; the
confidence interval is the normal approximation around the full-data point
estimate.

Rubin pooling combines a within-imputation variance W with the between-
imputation variance B as T = W + (1 + 1/M) B and refers the interval to a
t distribution with the Barnard-Rubin small-sample degrees of freedom.  The
within term used here is the variance-of-mean over the subjects included in
the cell; it ignores imputation-model estimation noise, which makes the
pooled interval approximate (and, empirically, conservative).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.stats import norm, t as student_t

from .estimators import (DIFFERENCE, E0_UNION_E1, EmptyStratumError,
                         StratumTriple, cell_values, estimate, parameter_name)
from .imputation import ImputationFitError, ImputationPlan, ImputedDataset, impute_many
from .streams import derive_seed, stream
from .trial_data import StratumLabel, TrialDataset


class Target(NamedTuple):
    """One reportable parameter: a stratum mean or difference on a subset."""

    stratum: StratumLabel
    treatment: object  # 0, 1 or DIFFERENCE
    subset: str = E0_UNION_E1

    @property
    def parameter(self) -> str:
        return parameter_name(self.stratum, self.treatment)


@dataclass
class BootstrapResult:
    B: int
    replicate_estimates: np.ndarray
    se: float
    ci: tuple[float, float]
    point: float
    skipped: int = 0
    unreliable: bool = False


@dataclass
class RubinResult:
    qbar: float
    w: float
    b: float
    total_var: float
    df: float
    ci: tuple[float, float]
    M: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total_var))


def _resample(dataset: TrialDataset, rng: np.random.Generator) -> TrialDataset:
    """Within-arm resample with replacement preserving the arm sizes."""
    rows0 = np.flatnonzero(dataset.arm == 0)
    rows1 = np.flatnonzero(dataset.arm == 1)
    idx = np.concatenate([rows0[rng.integers(0, rows0.size, rows0.size)],
                          rows1[rng.integers(0, rows1.size, rows1.size)]])
    return dataset.take(idx)


def bootstrap(dataset: TrialDataset, plan: ImputationPlan, M_b: int, B: int,
              seed: int, targets: Sequence[Target], *,
              point_estimates: dict[Target, float] | None = None,
              alpha: float = 0.05,
              max_skip_fraction: float = 0.10) -> dict[Target, BootstrapResult]:
    """Bootstrap SE and normal-approximation CI for each target.

    Replicate b draws its resample and its M_b imputations from substreams
    derived from (seed, b), so a longer run extends the replicate stream
    without reshuffling it.  Replicates that hit an empty stratum or a fit
    failure are skipped; results are flagged unreliable when more than
    `max_skip_fraction` of them skip.
    """
    if B < 2:
        raise ValueError("B must be at least 2")
    groups = list(dict.fromkeys((t.stratum, t.subset) for t in targets))

    def evaluate(imps) -> dict[Target, float]:
        vals = {}
        for stratum, subset in groups:
            triple = estimate(imps, stratum, subset)
            for tgt in targets:
                if tgt.stratum is stratum and tgt.subset == subset:
                    vals[tgt] = triple.by_treatment(tgt.treatment).pooled
        return vals

    if point_estimates is None:
        point_imps = impute_many(dataset, plan, M_b, derive_seed(seed, 1))
        point_estimates = evaluate(point_imps)

    values: dict[Target, list[float]] = {tgt: [] for tgt in targets}
    skipped = 0
    for b in range(B):
        rep = _resample(dataset, stream(seed, 0, b))
        try:
            imps = impute_many(rep, plan, M_b, derive_seed(seed, 0, b, 1))
            rep_values = evaluate(imps)
        except (EmptyStratumError, ImputationFitError):
            skipped += 1
            continue
        for tgt in targets:
            values[tgt].append(rep_values[tgt])

    kept = B - skipped
    if kept < 2:
        raise ValueError(f"only {kept} of {B} bootstrap replicates usable")
    zq = float(norm.ppf(1.0 - alpha / 2.0))
    unreliable = skipped > max_skip_fraction * B
    out = {}
    for tgt in targets:
        reps = np.asarray(values[tgt])
        se = float(reps.std(ddof=1))
        point = float(point_estimates[tgt])
        out[tgt] = BootstrapResult(B, reps, se, (point - zq * se, point + zq * se),
                                   point, skipped, unreliable)
    return out


def rubin_pool(per_imputation_estimates, per_imputation_variances,
               n_complete_df: float, alpha: float = 0.05) -> RubinResult:
    """Combine M estimates and their within variances into one interval.

    total_var = W + (1 + 1/M) B with W the mean within variance and B the
    between-imputation sample variance; the t reference uses the
    Barnard-Rubin adjusted degrees of freedom with complete-data df
    `n_complete_df`.
    """
    q = np.asarray(per_imputation_estimates, dtype=np.float64)
    u = np.asarray(per_imputation_variances, dtype=np.float64)
    M = q.size
    if M < 2:
        raise ValueError("Rubin pooling needs at least two imputations")
    if u.size != M:
        raise ValueError("one variance per estimate required")
    if (u < 0).any():
        raise ValueError("variances must be non-negative")
    qbar = float(q.mean())
    w = float(u.mean())
    b = float(q.var(ddof=1))
    total = w + (1.0 + 1.0 / M) * b

    nu_com = float(n_complete_df)
    if total == 0.0:
        df = nu_com if nu_com > 0 else 1.0
    else:
        lam = (1.0 + 1.0 / M) * b / total
        nu_obs = (nu_com + 1.0) / (nu_com + 3.0) * nu_com * (1.0 - lam)
        if lam == 0.0:
            df = nu_obs
        else:
            nu_old = (M - 1.0) / lam ** 2
            df = 0.0 if nu_obs == 0.0 else 1.0 / (1.0 / nu_old + 1.0 / nu_obs)
    df = max(df, 1.0)  # degenerate guard; unreachable for real data

    half = float(student_t.ppf(1.0 - alpha / 2.0, df)) * float(np.sqrt(total))
    return RubinResult(qbar, w, b, total, df, (qbar - half, qbar + half), M)


def within_variance(imputed: ImputedDataset, stratum: StratumLabel, treatment,
                    subset: str = E0_UNION_E1) -> float:
    """Within-imputation variance of one cell: var of the included outcome
    values over the included count.  A difference sums the two treatments'."""
    if treatment == DIFFERENCE:
        return (within_variance(imputed, stratum, 0, subset)
                + within_variance(imputed, stratum, 1, subset))
    vals = cell_values(imputed, stratum, treatment, subset)
    if vals.size < 2:
        raise ValueError(f"need at least two included subjects, got {vals.size}")
    return float(vals.var(ddof=1)) / vals.size


def rubin_for_target(imputations: list[ImputedDataset], triple: StratumTriple,
                     target: Target, alpha: float = 0.05) -> RubinResult:
    """Rubin interval for one target given its pooled triple.

    The complete-data df is the mean effective cell size minus one -- the
    cell denominator varies across imputations, so this is an approximation.
    """
    est = triple.by_treatment(target.treatment)
    variances = [within_variance(imp, target.stratum, target.treatment, target.subset)
                 for imp in imputations]
    return rubin_pool(est.per_imputation, variances,
                      n_complete_df=max(est.n_effective - 1.0, 1.0), alpha=alpha)


def z_test(estimate_value: float, se: float, null: float = 0.0) -> float:
    """Two-sided normal p-value for H0: parameter equals `null`."""
    if se <= 0:
        raise ValueError("se must be positive")
    return float(2.0 * norm.sf(abs(estimate_value - null) / se))


def write_inference_csv(rows: list[tuple[str, str, float, float, float, float, int]],
                        path) -> None:
    """rows: (parameter, method, estimate, se, ci_lo, ci_hi, B_or_M)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("parameter,method,estimate,se,ci_lo,ci_hi,B_or_M\n")
        for parameter, method, est, se, lo, hi, bm in rows:
            fh.write(",".join([parameter, method, repr(float(est)), repr(float(se)),
                               repr(float(lo)), repr(float(hi)), str(bm)]) + "\n")
