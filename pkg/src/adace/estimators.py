"""Stratum mean and treatment-difference estimators on completed datasets.

Each cell is a weighted average of a potential-outcome stream with 0/1
weights that encode stratum membership: a subject enters the cell for
stratum S and imputation m when every adherence value the stratum requires
equals 1 in that subject's frame (observed A for the assigned arm, imputed
A(t) for the other).  Because frames hold observed Y where available and
own-arm imputed Y elsewhere, selecting frame values by mask reproduces the
mixed observed/imputed numerators exactly.

Estimates for the control-adherers stratum come from relabelling arms
(0 <-> 1) and evaluating the experimental-adherers formulas on the view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imputation import BASELINE_ONLY, ImputationPlan, ImputedDataset, impute_many
from .trial_data import StratumLabel, TrialDataset

E0 = "E0"
E1 = "E1"
E0_UNION_E1 = "E0uE1"
SUBSETS = (E0, E1, E0_UNION_E1)

DIFFERENCE = "difference"

_REQUIRED_ADHERENCE = {
    StratumLabel.S_STAR_PLUS: (1,),
    StratumLabel.S_PLUS_PLUS: (0, 1),
}

_TREATMENT_TAG = {0: "0", 1: "1", DIFFERENCE: "d"}


def parameter_name(stratum: StratumLabel, treatment) -> str:
    """Canonical report name, e.g. mu_d_++ for the both-adherers difference."""
    return f"mu_{_TREATMENT_TAG[treatment]}_{stratum.value[1:]}"


class EmptyStratumError(ValueError):
    def __init__(self, m: int, stratum: StratumLabel, subset: str):
        super().__init__(f"empty stratum {stratum.value} for subset {subset} "
                         f"in imputation {m}")
        self.m = m
        self.stratum = stratum
        self.subset = subset


def _swap_subset(subset: str) -> str:
    return {E0: E1, E1: E0, E0_UNION_E1: E0_UNION_E1}[subset]


def cell_values(imputed: ImputedDataset, stratum: StratumLabel, treatment: int,
                subset: str = E0_UNION_E1) -> np.ndarray:
    """Outcome values of the subjects included in one estimator cell."""
    if stratum is StratumLabel.S_PLUS_STAR:
        return cell_values(imputed.swap_arms(), StratumLabel.S_STAR_PLUS,
                           1 - treatment, _swap_subset(subset))
    mask = np.ones(imputed.n, dtype=bool)
    for t in _REQUIRED_ADHERENCE[stratum]:
        mask &= imputed.a[t] == 1
    if subset == E0:
        mask &= imputed.arm == 0
    elif subset == E1:
        mask &= imputed.arm == 1
    elif subset != E0_UNION_E1:
        raise ValueError(f"unknown subset {subset!r}")
    return imputed.y[treatment][mask]


def estimate_cell(imputed: ImputedDataset, stratum: StratumLabel, treatment: int,
                  subset: str = E0_UNION_E1) -> float:
    """One imputation's weighted-average cell for (stratum, treatment, subset)."""
    vals = cell_values(imputed, stratum, treatment, subset)
    if vals.size == 0:
        raise EmptyStratumError(imputed.m, stratum, subset)
    return float(vals.mean())


@dataclass
class StratumEstimate:
    stratum: StratumLabel
    treatment: object  # 0, 1 or DIFFERENCE
    subset: str
    per_imputation: np.ndarray
    pooled: float
    n_effective: float          # mean cell denominator across imputations
    denominators: np.ndarray
    skipped: int = 0

    @property
    def parameter(self) -> str:
        return parameter_name(self.stratum, self.treatment)


@dataclass
class StratumTriple:
    treat0: StratumEstimate
    treat1: StratumEstimate
    difference: StratumEstimate

    def by_treatment(self, treatment) -> StratumEstimate:
        return {0: self.treat0, 1: self.treat1,
                DIFFERENCE: self.difference}[treatment]

    def __iter__(self):
        return iter((self.treat0, self.treat1, self.difference))


def estimate(imputations: list[ImputedDataset], stratum: StratumLabel,
             subset: str = E0_UNION_E1, *, on_empty: str = "error") -> StratumTriple:
    """Pool the per-imputation cells for both treatments and their difference.

    The difference is computed within each imputation and then pooled.  With
    on_empty="skip", imputations with an empty cell are dropped from every
    pool and counted in `skipped` (default is to raise).
    """
    if not imputations:
        raise ValueError("need at least one imputation")
    if on_empty not in ("error", "skip"):
        raise ValueError(f"unknown empty-stratum policy {on_empty!r}")
    v0, v1, c0, c1 = [], [], [], []
    skipped = 0
    for imp in imputations:
        try:
            a0 = cell_values(imp, stratum, 0, subset)
            a1 = cell_values(imp, stratum, 1, subset)
            if a0.size == 0 or a1.size == 0:
                raise EmptyStratumError(imp.m, stratum, subset)
        except EmptyStratumError:
            if on_empty == "skip":
                skipped += 1
                continue
            raise
        v0.append(a0.mean())
        v1.append(a1.mean())
        c0.append(a0.size)
        c1.append(a1.size)
    if not v0:
        raise EmptyStratumError(imputations[0].m, stratum, subset)
    v0 = np.asarray(v0)
    v1 = np.asarray(v1)
    c0 = np.asarray(c0)
    c1 = np.asarray(c1)

    def make(treatment, vals, counts):
        return StratumEstimate(stratum, treatment, subset, vals,
                               float(vals.mean()), float(counts.mean()),
                               counts, skipped)

    return StratumTriple(
        treat0=make(0, v0, c0),
        treat1=make(1, v1, c1),
        difference=make(DIFFERENCE, v1 - v0, np.minimum(c0, c1)),
    )


def estimate_principal_score_comparator(dataset: TrialDataset, M: int, seed: int,
                                        stratum: StratumLabel,
                                        subset: str = E0_UNION_E1,
                                        on_empty: str = "error") -> StratumTriple:
    """Same pipeline with baseline-only imputation models (principal-score
    comparator): stratum membership and outcomes are predicted from X alone."""
    imputations = impute_many(dataset, ImputationPlan(mode=BASELINE_ONLY), M, seed)
    return estimate(imputations, stratum, subset, on_empty=on_empty)


def write_estimates_csv(triples: list[StratumTriple], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("stratum,subset,treatment,estimate,n_effective,M\n")
        for triple in triples:
            for est in triple:
                fh.write(",".join([
                    est.stratum.value, est.subset, _TREATMENT_TAG[est.treatment],
                    repr(est.pooled), repr(est.n_effective),
                    str(est.per_imputation.size),
                ]) + "\n")
