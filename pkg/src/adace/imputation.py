"""Proper multiple imputation of potential outcomes under both treatments.

Models are fitted per arm on that arm's observed data only, in visit order:

    Z(1) | X,  Z(2) | X, Z(<2),  ...,  Y | X, Z,  I(k) | X, Z(k)

with the I(k) logistic models fitted among subjects still at risk at period
k (I(k-1) = 1).  One imputation then (a) draws model parameters from their
approximate posterior, (b) draws the full counterfactual trajectory
(Z, Y, I, A under treatment 1-arm) for every subject, and (c) draws the
subject's own-arm post-dropout Z and Y from the same arm's models.  Observed
values are copied verbatim and own-arm adherence is never imputed.

Parameter draw laws:

  * linear models: sigma*^2 = s2_hat * df / chi2(df), then
    coef* ~ Normal(coef_hat, sigma*^2 * (X'X)^-1)  (classical normal /
    inverse-chi-square proper-imputation draw);
  * logistic models: coef* ~ Normal(coef_hat, cov_hat) with cov_hat the
    inverse penalised observed information (a plug-in switch disables the
    draw);
  * a period whose at-risk response is single-class carries no information
    about adherence predictors, so it degenerates to an intercept-only
    Bernoulli rate with a Jeffreys Beta(y+1/2, n-y+1/2) posterior draw.

Imputed adherence cascades: the first imputed 0 forces all later I to 0.
Later Z and Y under that treatment are still drawn -- frames always hold the
hypothetical-adherence trajectory and the estimators decide relevance.

Draw-consumption order within one imputation's substream (fixed so that
results are reproducible bit-for-bit): for each source arm t in (0, 1),
parameter draws in step order, then one normal block for Z/Y values, then
one uniform block for counterfactual adherence.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .streams import stream
from .trial_data import PotentialOutcomeFrame, TrialDataset, validate

FULL = "full"
BASELINE_ONLY = "baseline_only"


class ImputationError(Exception):
    pass


class SingularDesignError(ImputationError):
    pass


class InsufficientDataError(ImputationError):
    pass


class SeparationError(ImputationError):
    pass


class NotConvergedError(ImputationError):
    pass


class ImputationFitError(ImputationError):
    """A model fit failed; carries the (arm, step) it belongs to."""

    def __init__(self, arm: int, step: str, cause: Exception):
        super().__init__(f"arm {arm}, step {step}: {cause}")
        self.arm = arm
        self.step = step
        self.cause = cause


class InvalidDatasetError(ImputationError):
    pass


# ---------------------------------------------------------------------------
# regression models


@dataclass
class LinearImputationModel:
    coef_hat: np.ndarray
    xtx_inv: np.ndarray
    s2_hat: float
    df: int
    predictor_spec: tuple[str, ...] = ()
    # factor L with L @ L.T == xtx_inv, kept for fast posterior draws
    chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol is None:
            self.chol = np.linalg.cholesky(self.xtx_inv)


def fit_linear(design, response, predictor_spec: tuple[str, ...] = ()) -> LinearImputationModel:
    """Least squares via QR, with residual variance and (X'X)^-1.

    Raises InsufficientDataError when n <= q and SingularDesignError when the
    design is rank deficient.
    """
    X = np.asarray(design, dtype=np.float64)
    yv = np.asarray(response, dtype=np.float64)
    n, q = X.shape
    if n <= q:
        raise InsufficientDataError(f"{n} rows for {q} coefficients")
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.min() <= 1e-10 * max(diag.max(), 1.0):
        raise SingularDesignError("design is rank deficient")
    coef = solve_triangular(R, Q.T @ yv)
    resid = yv - X @ coef
    df = n - q
    s2 = float(resid @ resid) / df
    r_inv = solve_triangular(R, np.eye(q))
    xtx_inv = r_inv @ r_inv.T
    return LinearImputationModel(coef, xtx_inv, s2, df, predictor_spec, chol=r_inv)


def draw_linear(model: LinearImputationModel, rng: np.random.Generator):
    """One posterior parameter draw -> (coef_star, sigma_star)."""
    g = rng.chisquare(model.df)
    sigma_star = float(np.sqrt(model.s2_hat * model.df / g))
    coef_star = model.coef_hat + sigma_star * (model.chol @ rng.standard_normal(model.coef_hat.size))
    return coef_star, sigma_star


@dataclass
class LogisticImputationModel:
    coef_hat: np.ndarray
    cov_hat: np.ndarray
    predictor_spec: tuple[str, ...] = ()
    converged: bool = True
    fit_subset_rule: str = ""
    ridge: float = 1e-6
    chol: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.chol is None:
            try:
                self.chol = np.linalg.cholesky(self.cov_hat)
            except np.linalg.LinAlgError:
                # PSD but singular (or numerically so): eigenvalue square root
                w, v = np.linalg.eigh(self.cov_hat)
                self.chol = v * np.sqrt(np.clip(w, 0.0, None))


def _penalised_loglik(X, yv, beta, lam):
    eta = X @ beta
    return float(yv @ eta - np.logaddexp(0.0, eta).sum() - 0.5 * lam * (beta @ beta))


def _irls(X, yv, lam, max_iter, tol):
    n, q = X.shape
    beta = np.zeros(q)
    eye = lam * np.eye(q)
    ll = _penalised_loglik(X, yv, beta, lam)
    hess = X.T @ (0.25 * X) + eye
    for _ in range(max_iter):
        p = expit(X @ beta)
        score = X.T @ (yv - p) - lam * beta
        w = p * (1.0 - p)
        hess = X.T @ (w[:, None] * X) + eye
        if np.abs(score).max() < tol:
            return beta, np.linalg.inv(hess), True
        delta = np.linalg.solve(hess, score)
        for _ in range(25):  # halve until the penalised log-likelihood improves
            cand = beta + delta
            cand_ll = _penalised_loglik(X, yv, cand, lam)
            if cand_ll >= ll - 1e-12:
                break
            delta = 0.5 * delta
        beta, ll = cand, cand_ll
    return beta, np.linalg.inv(hess), False


def fit_logistic(design, response, *, ridge: float = 1e-6, fallback_ridge: float = 1e-2,
                 max_iter: int = 100, tol: float = 1e-8,
                 predictor_spec: tuple[str, ...] = (),
                 fit_subset_rule: str = "") -> LogisticImputationModel:
    """Ridge-penalised logistic fit via IRLS with step halving.

    The nominal penalty is negligible; when the fit fails to converge (the
    separated-data regime) it is retried at the fallback penalty, and the
    `converged` flag records the outcome.  A single-class response is a
    SeparationError.
    """
    X = np.asarray(design, dtype=np.float64)
    yv = np.asarray(response, dtype=np.float64)
    if yv.min() == yv.max():
        raise SeparationError("response takes a single value")
    for lam in (ridge, fallback_ridge):
        coef, cov, ok = _irls(X, yv, lam, max_iter, tol)
        if ok:
            return LogisticImputationModel(coef, cov, predictor_spec, True,
                                           fit_subset_rule, lam)
    return LogisticImputationModel(coef, cov, predictor_spec, False,
                                   fit_subset_rule, fallback_ridge)


def draw_logistic(model: LogisticImputationModel, rng: np.random.Generator) -> np.ndarray:
    """Normal-approximation posterior draw of the coefficient vector."""
    if not model.converged:
        raise NotConvergedError("refusing to draw from a non-converged fit")
    return model.coef_hat + model.chol @ rng.standard_normal(model.coef_hat.size)


@dataclass
class ConstantRateModel:
    """Intercept-only Bernoulli fallback for a single-class at-risk response.

    The period's data carry no information about adherence predictors, so the
    posterior for the rate is Jeffreys Beta(ones + 1/2, count - ones + 1/2).
    """

    ones: int
    count: int
    fit_subset_rule: str = ""

    def draw(self, rng: np.random.Generator) -> float:
        return float(rng.beta(self.ones + 0.5, self.count - self.ones + 0.5))

    @property
    def rate(self) -> float:
        return self.ones / self.count


# ---------------------------------------------------------------------------
# imputation plan and completed datasets


@dataclass(frozen=True)
class ImputationPlan:
    """Which predictors each imputation step may use.

    `full` conditions each step on X plus the same-arm trajectory so far;
    `baseline_only` strips every Z term (the principal-score comparator) so
    all imputations depend on baseline covariates alone.  `logistic_plug_in`
    switches the adherence models from posterior draws to plug-in MLEs.
    """

    mode: str = FULL
    logistic_plug_in: bool = False

    def __post_init__(self):
        if self.mode not in (FULL, BASELINE_ONLY):
            raise ValueError(f"unknown plan mode {self.mode!r}")

    def steps(self, p: int, K: int):
        """Ordered (target, predictors) pairs; every predictor is observed or
        produced by an earlier step."""
        x_terms = ["1"] + [f"x{i + 1}" for i in range(p)]
        out = []
        for k in range(1, K):
            prior = [f"z{j}" for j in range(1, k)] if self.mode == FULL else []
            out.append((f"z{k}", tuple(x_terms + prior)))
        z_all = [f"z{j}" for j in range(1, K)] if self.mode == FULL else []
        out.append(("y", tuple(x_terms + z_all)))
        for k in range(1, K):
            zk = [f"z{k}"] if self.mode == FULL else []
            out.append((f"i{k}", tuple(x_terms + zk)))
        return out


class ImputedDataset:
    """One completed copy: every subject's (Z, I, A, Y) under both treatments.

    Axis 0 of each array indexes the hypothetical treatment t.  Cells with
    `observed_* == True` were copied from the trial data (t == arm).
    """

    def __init__(self, m, plan_mode, rng_stream_id, subject_ids, arm,
                 z, i_flags, a, y, observed_z, observed_i, observed_y):
        self.m = m
        self.plan_mode = plan_mode
        self.rng_stream_id = rng_stream_id
        self.subject_ids = subject_ids
        self.arm = arm
        self.z = z
        self.i_flags = i_flags
        self.a = a
        self.y = y
        self.observed_z = observed_z
        self.observed_i = observed_i
        self.observed_y = observed_y

    @property
    def n(self) -> int:
        return self.arm.shape[0]

    @property
    def n_periods(self) -> int:
        return self.z.shape[2]

    def frame(self, j: int) -> PotentialOutcomeFrame:
        return PotentialOutcomeFrame(
            subject_id=self.subject_ids[j], arm=int(self.arm[j]),
            z=self.z[:, j].copy(), i_flags=self.i_flags[:, j].copy(),
            a=self.a[:, j].copy(), y=self.y[:, j].copy(),
            observed_z=self.observed_z[:, j].copy(),
            observed_i=self.observed_i[:, j].copy(),
            observed_y=self.observed_y[:, j].copy())

    def frames(self):
        return (self.frame(j) for j in range(self.n))

    def swap_arms(self) -> "ImputedDataset":
        """Relabelled view with treatments 0 and 1 exchanged (no data copy)."""
        return ImputedDataset(
            self.m, self.plan_mode, self.rng_stream_id, self.subject_ids,
            1 - self.arm, self.z[::-1], self.i_flags[::-1], self.a[::-1],
            self.y[::-1], self.observed_z[::-1], self.observed_i[::-1],
            self.observed_y[::-1])


# ---------------------------------------------------------------------------
# fitting


class FittedImputer:
    """Arm-specific models plus the per-subject scaffolding reused by draws."""

    def __init__(self, dataset: TrialDataset, plan: ImputationPlan):
        violations = validate(dataset)
        if violations:
            head = "; ".join(str(v) for v in violations[:5])
            raise InvalidDatasetError(
                f"{len(violations)} validation violation(s): {head}")
        if dataset.n0 == 0 or dataset.n1 == 0:
            raise InvalidDatasetError("both arms must be non-empty")
        self.dataset = dataset
        self.plan = plan
        n, p, k1 = dataset.n, dataset.p, dataset.K - 1
        self._full = plan.mode == FULL

        arm = dataset.arm
        self._rows = [np.flatnonzero(arm == t) for t in (0, 1)]
        self._cf_rows = [np.flatnonzero(arm != t) for t in (0, 1)]

        # frame templates: own-arm observed values in place, NaN elsewhere
        self._z_tmpl = np.full((2, n, k1), np.nan)
        self._y_tmpl = np.full((2, n), np.nan)
        self._i_tmpl = np.zeros((2, n, k1), dtype=np.int8)
        self._a_tmpl = np.zeros((2, n), dtype=np.int8)
        self.observed_z = np.zeros((2, n, k1), dtype=bool)
        self.observed_i = np.zeros((2, n, k1), dtype=bool)
        self.observed_y = np.zeros((2, n), dtype=bool)
        for t in (0, 1):
            rows = self._rows[t]
            self._z_tmpl[t, rows] = dataset.z[rows]
            self._y_tmpl[t, rows] = dataset.y[rows]
            iflags = dataset.i_flags[rows]
            observed = ~np.isnan(iflags)
            self._i_tmpl[t, rows] = np.where(observed, iflags, 0.0).astype(np.int8)
            self._a_tmpl[t, rows] = (observed & (iflags == 1)).all(axis=1)
            self.observed_z[t, rows] = ~np.isnan(dataset.z[rows])
            self.observed_i[t, rows] = observed
            self.observed_y[t, rows] = ~np.isnan(dataset.y[rows])
        self._z_missing = ~self.observed_z
        self._y_missing = ~self.observed_y
        # the observed masks are shared by every ImputedDataset built here
        for a in (self.observed_z, self.observed_i, self.observed_y):
            a.setflags(write=False)

        # design buffer prototype: [1, x1..xp, z1..z{K-1}]
        self._proto = np.empty((n, 1 + p + k1))
        self._proto[:, 0] = 1.0
        self._proto[:, 1:1 + p] = dataset.x
        self._q_x = 1 + p

        self.models = [self._fit_arm(t) for t in (0, 1)]

    def _fit_arm(self, t: int):
        ds = self.dataset
        rows = self._rows[t]
        x, z, iflags, y = ds.x[rows], ds.z[rows], ds.i_flags[rows], ds.y[rows]
        k1 = ds.K - 1
        steps = dict(self.plan.steps(ds.p, ds.K))

        def design(fit_rows, n_prior_z, extra_z_col=None):
            cols = [np.ones(fit_rows.sum()), x[fit_rows].T]
            if self._full and n_prior_z:
                cols.append(z[fit_rows, :n_prior_z].T)
            if extra_z_col is not None:
                cols.append(z[fit_rows, extra_z_col][None, :])
            return np.vstack([np.atleast_2d(c) for c in cols]).T

        z_models = []
        for k in range(k1):
            fit_rows = ~np.isnan(z[:, k])
            try:
                z_models.append(fit_linear(design(fit_rows, k), z[fit_rows, k],
                                           steps[f"z{k + 1}"]))
            except ImputationError as e:
                raise ImputationFitError(t, f"z{k + 1}", e) from e

        fit_rows = ~np.isnan(y)
        try:
            y_model = fit_linear(design(fit_rows, k1), y[fit_rows], steps["y"])
        except ImputationError as e:
            raise ImputationFitError(t, "y", e) from e

        i_models = []
        for k in range(k1):
            at_risk = np.ones(rows.size, dtype=bool) if k == 0 else iflags[:, k - 1] == 1
            rule = f"at-risk at period {k + 1}"
            resp = iflags[at_risk, k]
            if resp.size == 0:
                raise ImputationFitError(t, f"i{k + 1}",
                                         InsufficientDataError("no at-risk subjects"))
            if np.isnan(resp).any():  # guarded by validate(); defensive only
                raise ImputationFitError(t, f"i{k + 1}",
                                         InvalidDatasetError("missing at-risk flag"))
            if resp.min() == resp.max():
                i_models.append(ConstantRateModel(int(resp.sum()), int(resp.size), rule))
                continue
            zcol = k if self._full else None
            try:
                i_models.append(fit_logistic(design(at_risk, 0, extra_z_col=zcol),
                                             resp, predictor_spec=steps[f"i{k + 1}"],
                                             fit_subset_rule=rule))
            except ImputationError as e:
                raise ImputationFitError(t, f"i{k + 1}", e) from e
        return z_models, y_model, i_models

    def impute(self, m: int, rng: np.random.Generator,
               stream_id: str = "") -> ImputedDataset:
        ds = self.dataset
        n, k1 = ds.n, ds.K - 1
        qx = self._q_x
        z = self._z_tmpl.copy()
        y = self._y_tmpl.copy()
        iflags = self._i_tmpl.copy()
        a = self._a_tmpl.copy()

        for t in (0, 1):
            z_models, y_model, i_models = self.models[t]
            z_params = [draw_linear(mz, rng) for mz in z_models]
            y_param = draw_linear(y_model, rng)
            i_params = []
            for mi in i_models:
                if isinstance(mi, ConstantRateModel):
                    i_params.append(mi.rate if self.plan.logistic_plug_in
                                    else mi.draw(rng))
                elif self.plan.logistic_plug_in:
                    i_params.append(mi.coef_hat)
                else:
                    i_params.append(draw_logistic(mi, rng))

            z_noise = rng.standard_normal((k1, n))
            y_noise = rng.standard_normal(n)
            cf = self._cf_rows[t]
            u = rng.random((k1, cf.size))

            buf = self._proto.copy()
            for k in range(k1):
                coef, sig = z_params[k]
                lp = buf[:, :coef.size] @ coef
                miss = self._z_missing[t, :, k]
                z[t, miss, k] = lp[miss] + sig * z_noise[k, miss]
                buf[:, qx + k] = z[t, :, k]

            coef, sig = y_param
            lp = buf[:, :coef.size] @ coef
            miss = self._y_missing[t]
            y[t, miss] = lp[miss] + sig * y_noise[miss]

            # counterfactual adherence with an absorbing cascade
            ibuf = np.empty((cf.size, qx + 1))
            ibuf[:, :qx] = buf[cf, :qx]
            at_risk = np.ones(cf.size, dtype=bool)
            for k in range(k1):
                par = i_params[k]
                if isinstance(par, float):
                    pk = par
                else:
                    if par.size == qx + 1:
                        ibuf[:, qx] = z[t, cf, k]
                    pk = expit(ibuf[:, :par.size] @ par)
                drawn = (u[k] < pk) & at_risk
                iflags[t, cf, k] = drawn
                at_risk = drawn
            a[t, cf] = at_risk

        return ImputedDataset(
            m=m, plan_mode=self.plan.mode, rng_stream_id=stream_id,
            subject_ids=ds.subject_ids, arm=ds.arm, z=z, i_flags=iflags, a=a,
            y=y, observed_z=self.observed_z, observed_i=self.observed_i,
            observed_y=self.observed_y)


def fit_imputation_models(dataset: TrialDataset, plan: ImputationPlan) -> FittedImputer:
    return FittedImputer(dataset, plan)


def impute_once(dataset: TrialDataset, plan: ImputationPlan, m: int,
                rng: np.random.Generator, *, models: FittedImputer | None = None,
                stream_id: str = "") -> ImputedDataset:
    """Produce one completed dataset.  `models` may carry pre-fitted models to
    amortise fitting across imputations of the same dataset."""
    if models is None:
        models = FittedImputer(dataset, plan)
    return models.impute(m, rng, stream_id)


def impute_many(dataset: TrialDataset, plan: ImputationPlan, M: int,
                seed: int) -> list[ImputedDataset]:
    """M independent completed datasets; imputation m draws from the dedicated
    substream (seed, m), so outputs do not depend on evaluation order."""
    if M < 1:
        raise ValueError("M must be at least 1")
    models = FittedImputer(dataset, plan)
    return [models.impute(m, stream(seed, m), stream_id=f"seed={seed}/m={m}")
            for m in range(M)]


def export_imputations_csv(imputations: Sequence[ImputedDataset], path) -> None:
    """Long-format audit export: one row per (subject, imputation, treatment).

    The provenance column is a compact string: one character per Z cell, per
    I cell, then Y, with 'o' marking an observed cell and 'i' an imputed one.
    """
    if not imputations:
        raise ValueError("nothing to export")
    k1 = imputations[0].n_periods
    header = (["subject_id", "m", "t"]
              + [f"z{k + 1}" for k in range(k1)]
              + [f"i{k + 1}" for k in range(k1)]
              + ["a", "y", "provenance"])
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for imp in imputations:
            for j in range(imp.n):
                for t in (0, 1):
                    prov = "".join(
                        "o" if flag else "i"
                        for flag in (*imp.observed_z[t, j], *imp.observed_i[t, j],
                                     imp.observed_y[t, j]))
                    row = ([imp.subject_ids[j], str(imp.m), str(t)]
                           + [repr(float(v)) for v in imp.z[t, j]]
                           + [str(int(v)) for v in imp.i_flags[t, j]]
                           + [str(int(imp.a[t, j])), repr(float(imp.y[t, j])), prov])
                    fh.write(",".join(row) + "\n")
