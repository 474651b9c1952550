"""Trial generation, brute-force truth oracle, and replication studies.

The data-generating model for a two-arm parallel trial with K - 1
intermediate visits (defaults mimic an HbA1c trial in diabetes):

    X ~ Normal(mu_x, sigma_x^2)                                  (baseline)
    Z(t)^(k) = alpha0[k] + alpha1[k] X + alpha2[k] t + eta^(k)   (visits)
    Y(t)     = beta0 + beta1 X + beta2 t + sum_k beta3[k] Z(t)^(k) + eps
    logit Pr(I(t)^(k) = 1 | I(t)^(k-1) = 1, X, Z(t)^(k))
             = gamma0 + gamma1 X + gamma3[k] Z(t)^(k)            (adherence)

with I(t)^(0) = 1, an absorbing 0, and independent noise between the two
hypothetical treatments.  The observed trial masks the off-arm trajectory
entirely and everything after the subject's own dropout.

Truth values are Monte Carlo: simulate the joint potential outcomes for a
large synthetic population, form the strata exactly from A(0) and A(1), and
average Y(0), Y(1) and their difference within each stratum.
"""

from __future__ import annotations

import concurrent.futures
import os
import time
from dataclasses import dataclass, fields, replace

import numpy as np
from scipy.special import expit

from .estimators import DIFFERENCE, E0_UNION_E1, estimate, parameter_name
from .imputation import (FULL, ImputationError, ImputationPlan, impute_many)
from .inference import Target, bootstrap, rubin_for_target, z_test
from .streams import derive_seed, stream
from .trial_data import StratumLabel, TrialDataset

# substream tags under a study seed
_TAG_DATA, _TAG_IMPUTE, _TAG_BOOT, _TAG_ORACLE = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SettingConfig:
    """Full parameterisation of the data-generating model."""

    mu_x: float
    sigma_x: float
    alpha0: tuple[float, ...]
    alpha1: tuple[float, ...]
    alpha2: tuple[float, ...]
    beta0: float
    beta1: float
    beta2: float
    beta3: tuple[float, ...]
    sigma_eta: float
    sigma_eps: float
    gamma0: float
    gamma1: float
    gamma3: tuple[float, ...]
    n_per_arm: int = 150
    K: int = 4

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        k1 = self.K - 1
        for name in ("alpha0", "alpha1", "alpha2", "beta3", "gamma3"):
            arr = getattr(self, name)
            if len(arr) != k1:
                raise ConfigError(f"{name} must have K-1 = {k1} entries")
        for name in ("sigma_x", "sigma_eta", "sigma_eps"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.n_per_arm < 1:
            raise ConfigError("n_per_arm must be positive")
        scalars = [self.mu_x, self.sigma_x, self.beta0, self.beta1, self.beta2,
                   self.sigma_eta, self.sigma_eps, self.gamma0, self.gamma1,
                   *self.alpha0, *self.alpha1, *self.alpha2, *self.beta3,
                   *self.gamma3]
        if not np.isfinite(scalars).all():
            raise ConfigError("all coefficients must be finite")

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SettingConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = known - set(data) - {"n_per_arm", "K"}
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        kwargs = {}
        for f in fields(cls):
            if f.name not in data:
                continue
            v = data[f.name]
            if f.name in ("alpha0", "alpha1", "alpha2", "beta3", "gamma3"):
                kwargs[f.name] = tuple(float(x) for x in v)
            elif f.name in ("n_per_arm", "K"):
                kwargs[f.name] = int(v)
            else:
                kwargs[f.name] = float(v)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _setting(gamma1: float) -> SettingConfig:
    return SettingConfig(
        mu_x=8.0, sigma_x=1.0,
        alpha0=(2.3, 2.3, 2.3), alpha1=(-0.3, -0.3, -0.3),
        alpha2=(-0.4, -0.9, -1.2),
        beta0=0.2, beta1=-0.02, beta2=-0.2, beta3=(0.2, 0.4, 0.7),
        sigma_eta=0.4, sigma_eps=0.3,
        gamma0=3.0, gamma1=gamma1, gamma3=(-1.0, -2.0, -2.5),
        n_per_arm=150, K=4)


def make_null(cfg: SettingConfig) -> SettingConfig:
    """Zero out the treatment-effect coefficients; everything else unchanged."""
    return replace(cfg, alpha2=tuple(0.0 for _ in cfg.alpha2), beta2=0.0)


SETTINGS: dict[str, SettingConfig] = {
    "setting1": _setting(-0.1),
    "setting2": _setting(-0.25),
}
SETTINGS["setting1-null"] = make_null(SETTINGS["setting1"])
SETTINGS["setting2-null"] = make_null(SETTINGS["setting2"])


def load_config(path) -> SettingConfig:
    """Flat key-value config file; arrays are comma-separated."""
    data = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, _, value = line.partition("=")
            key = key.strip()
            parts = [v.strip() for v in value.split(",")]
            try:
                data[key] = [float(v) for v in parts] if len(parts) > 1 else float(parts[0])
            except ValueError:
                raise ConfigError(f"line {lineno}: non-numeric value for "
                                  f"{key!r}") from None
    for name in ("alpha0", "alpha1", "alpha2", "beta3", "gamma3"):
        if name in data and not isinstance(data[name], list):
            data[name] = [data[name]]
    return SettingConfig.from_dict(data)


def save_config(cfg: SettingConfig, path) -> None:
    """Write the flat key-value form read back by load_config."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for key, value in cfg.as_dict().items():
            if isinstance(value, list):
                fh.write(f"{key} = {', '.join(repr(v) for v in value)}\n")
            else:
                fh.write(f"{key} = {value!r}\n")


def resolve_setting(name_or_path: str) -> SettingConfig:
    if name_or_path in SETTINGS:
        return SETTINGS[name_or_path]
    if os.path.exists(name_or_path):
        return load_config(name_or_path)
    raise ConfigError(f"unknown setting {name_or_path!r}: not a preset "
                      f"({', '.join(sorted(SETTINGS))}) and not a file")


# ---------------------------------------------------------------------------
# generation


def z_mean(cfg: SettingConfig, k: int, x, t: int):
    """Conditional mean of Z(t)^(k) given X = x (k is 1-based)."""
    return cfg.alpha0[k - 1] + cfg.alpha1[k - 1] * np.asarray(x) + cfg.alpha2[k - 1] * t


def y_mean(cfg: SettingConfig, x, t: int, z):
    """Conditional mean of Y(t) given X = x and the visit values z."""
    return (cfg.beta0 + cfg.beta1 * np.asarray(x) + cfg.beta2 * t
            + np.asarray(z) @ np.asarray(cfg.beta3))


def adherence_prob(cfg: SettingConfig, k: int, x, z_k):
    """Pr(I^(k) = 1 | at risk, X = x, Z^(k) = z_k), k 1-based."""
    return expit(cfg.gamma0 + cfg.gamma1 * np.asarray(x)
                 + cfg.gamma3[k - 1] * np.asarray(z_k))


@dataclass
class TruePotentialOutcomes:
    """Complete unmasked trajectories under both treatments (axis 0 = t)."""

    x: np.ndarray           # (n, 1)
    z: np.ndarray           # (2, n, K-1)
    i_flags: np.ndarray     # (2, n, K-1) int8
    a: np.ndarray           # (2, n) int8
    y: np.ndarray           # (2, n)


def _draw_arm(cfg: SettingConfig, x: np.ndarray, t: int, rng: np.random.Generator):
    """Potential (Z, Y, I, A) under treatment t for subjects with baseline x."""
    n = x.size
    k1 = cfg.K - 1
    eta = cfg.sigma_eta * rng.standard_normal((n, k1))
    eps = cfg.sigma_eps * rng.standard_normal(n)
    u = rng.random((n, k1))
    z = (np.asarray(cfg.alpha0) + np.outer(x, cfg.alpha1)
         + t * np.asarray(cfg.alpha2) + eta)
    y = (cfg.beta0 + cfg.beta1 * x + cfg.beta2 * t + z @ np.asarray(cfg.beta3) + eps)
    prob = expit(cfg.gamma0 + cfg.gamma1 * x[:, None] + z * np.asarray(cfg.gamma3))
    i_flags = np.empty((n, k1), dtype=np.int8)
    at_risk = np.ones(n, dtype=bool)
    for k in range(k1):
        drawn = (u[:, k] < prob[:, k]) & at_risk
        i_flags[:, k] = drawn
        at_risk = drawn
    return z, y, i_flags, at_risk.astype(np.int8)


def _draw_population(cfg: SettingConfig, n: int, seed: int, tag: int):
    x = cfg.mu_x + cfg.sigma_x * stream(seed, tag, 2).standard_normal(n)
    k1 = cfg.K - 1
    z = np.empty((2, n, k1))
    y = np.empty((2, n))
    i_flags = np.empty((2, n, k1), dtype=np.int8)
    a = np.empty((2, n), dtype=np.int8)
    for t in (0, 1):
        z[t], y[t], i_flags[t], a[t] = _draw_arm(cfg, x, t, stream(seed, tag, 3 + t))
    return x, z, y, i_flags, a


def generate_trial(cfg: SettingConfig, seed: int, *,
                   bernoulli_arms: bool = False) -> tuple[TrialDataset, TruePotentialOutcomes]:
    """Simulate one trial: the observed dataset plus its generating truth.

    Arms are a deterministic half split by default; `bernoulli_arms` assigns
    each subject by a fair coin instead (arm sizes then vary).
    """
    cfg.validate()
    n = 2 * cfg.n_per_arm
    x, z, y, i_flags, a = _draw_population(cfg, n, seed, _TAG_DATA)
    truth = TruePotentialOutcomes(x[:, None].copy(), z, i_flags, a, y)

    if bernoulli_arms:
        arm = (stream(seed, _TAG_DATA, 1).random(n) < 0.5).astype(np.int8)
    else:
        arm = np.zeros(n, dtype=np.int8)
        arm[cfg.n_per_arm:] = 1
    rows = np.arange(n)
    z_own = z[arm, rows]
    i_own = i_flags[arm, rows]
    y_own = y[arm, rows]
    a_own = a[arm, rows]

    k1 = cfg.K - 1
    z_obs = z_own.copy()
    for k in range(1, k1):
        z_obs[i_own[:, k - 1] == 0, k] = np.nan
    y_obs = np.where(a_own == 1, y_own, np.nan)

    dataset = TrialDataset(
        subject_ids=[f"s{j + 1:05d}" for j in range(n)],
        arm=arm, x=x[:, None], z=z_obs, i_flags=i_own.astype(np.float64),
        y=y_obs)
    return dataset, truth


# ---------------------------------------------------------------------------
# truth oracle

ORACLE_STRATA = (StratumLabel.S_STAR_PLUS, StratumLabel.S_PLUS_PLUS)
TREATMENTS = (0, 1, DIFFERENCE)


@dataclass
class OracleValue:
    mean: float
    mc_se: float


@dataclass
class OracleTruth:
    values: dict[tuple[StratumLabel, object], OracleValue]
    stratum_n: dict[StratumLabel, int]
    n_oracle: int

    def value(self, stratum: StratumLabel, treatment) -> float:
        return self.values[(stratum, treatment)].mean

    def mc_se(self, stratum: StratumLabel, treatment) -> float:
        return self.values[(stratum, treatment)].mc_se


def oracle_truth(cfg: SettingConfig, n_oracle: int, seed: int,
                 chunk: int = 1_000_000) -> OracleTruth:
    """Monte Carlo truth: stratum means of the joint potential outcomes.

    Simulates `n_oracle` subjects' unmasked trajectories in chunks and
    accumulates stratum sums; mc_se is sd / sqrt(stratum count).
    """
    cfg.validate()
    if n_oracle < 1:
        raise ConfigError("n_oracle must be positive")
    acc = {s: np.zeros(7) for s in ORACLE_STRATA}  # n, sums and sumsqs
    done = 0
    idx = 0
    while done < n_oracle:
        size = min(chunk, n_oracle - done)
        _, _, y, _, a = _draw_population(cfg, size, seed, idx)
        masks = {StratumLabel.S_STAR_PLUS: a[1] == 1,
                 StratumLabel.S_PLUS_PLUS: (a[0] == 1) & (a[1] == 1)}
        for s, mask in masks.items():
            y0 = y[0, mask]
            y1 = y[1, mask]
            d = y1 - y0
            acc[s] += (mask.sum(), y0.sum(), (y0 * y0).sum(), y1.sum(),
                       (y1 * y1).sum(), d.sum(), (d * d).sum())
        done += size
        idx += 1

    values = {}
    stratum_n = {}
    for s, (cnt, s0, q0, s1, q1, sd_, qd) in acc.items():
        if cnt == 0:
            raise ConfigError(f"stratum {s.value} is empty in the oracle population")
        stratum_n[s] = int(cnt)
        for treatment, total, totsq in ((0, s0, q0), (1, s1, q1), (DIFFERENCE, sd_, qd)):
            mean = total / cnt
            var = max(totsq / cnt - mean * mean, 0.0)
            values[(s, treatment)] = OracleValue(float(mean),
                                                 float(np.sqrt(var / cnt)))
    return OracleTruth(values, stratum_n, n_oracle)


def write_oracle_csv(truth: OracleTruth, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("parameter,value,mc_se,stratum_n\n")
        for s in ORACLE_STRATA:
            for treatment in TREATMENTS:
                v = truth.values[(s, treatment)]
                fh.write(",".join([parameter_name(s, treatment), repr(v.mean),
                                   repr(v.mc_se), str(truth.stratum_n[s])]) + "\n")


# ---------------------------------------------------------------------------
# replication studies

STUDY_TARGETS = tuple(Target(s, tr, E0_UNION_E1)
                      for s in ORACLE_STRATA for tr in TREATMENTS)


@dataclass
class ParameterSummary:
    parameter: str
    true_value: float
    mean_estimate: float
    bias: float
    boot_se: float
    boot_cp: float
    rubin_se: float
    rubin_cp: float
    reject_rate: float  # NaN unless the parameter is a difference with bootstrap


@dataclass
class StudyReport:
    rows: list[ParameterSummary]
    R: int
    n_failed: int
    failures: list[str]
    config: SettingConfig
    M: int
    B: int
    M_b: int
    seed: int
    plan_mode: str
    variance: str
    alpha: float
    elapsed_s: float = 0.0

    def row(self, parameter: str) -> ParameterSummary:
        for r in self.rows:
            if r.parameter == parameter:
                return r
        raise KeyError(parameter)


def _trial_task(args):
    (cfg, r, seed, M, B, M_b, plan, variance, alpha) = args
    try:
        dataset, _ = generate_trial(cfg, derive_seed(seed, _TAG_DATA, r))
        imps = impute_many(dataset, plan, M, derive_seed(seed, _TAG_IMPUTE, r))
        triples = {s: estimate(imps, s, E0_UNION_E1) for s in ORACLE_STRATA}

        k = len(STUDY_TARGETS)
        est = np.empty(k)
        boot_se = np.full(k, np.nan)
        boot_ci = np.full((k, 2), np.nan)
        rubin_se = np.full(k, np.nan)
        rubin_ci = np.full((k, 2), np.nan)
        reject = np.full(k, np.nan)

        points = {}
        for idx, tgt in enumerate(STUDY_TARGETS):
            points[tgt] = triples[tgt.stratum].by_treatment(tgt.treatment).pooled
            est[idx] = points[tgt]

        if variance in ("both", "rubin"):
            for idx, tgt in enumerate(STUDY_TARGETS):
                rr = rubin_for_target(imps, triples[tgt.stratum], tgt, alpha)
                rubin_se[idx] = rr.se
                rubin_ci[idx] = rr.ci
        if variance in ("both", "bootstrap"):
            boots = bootstrap(dataset, plan, M_b, B,
                              derive_seed(seed, _TAG_BOOT, r), STUDY_TARGETS,
                              point_estimates=points, alpha=alpha)
            for idx, tgt in enumerate(STUDY_TARGETS):
                br = boots[tgt]
                boot_se[idx] = br.se
                boot_ci[idx] = br.ci
                if tgt.treatment == DIFFERENCE and br.se > 0:
                    reject[idx] = float(z_test(br.point, br.se) < alpha)
        return {"r": r, "est": est, "boot_se": boot_se, "boot_ci": boot_ci,
                "rubin_se": rubin_se, "rubin_ci": rubin_ci, "reject": reject,
                "failed": None}
    except (ImputationError, ValueError) as e:
        return {"r": r, "failed": f"trial {r}: {type(e).__name__}: {e}"}


def run_study(cfg: SettingConfig, R: int, M: int, B: int, seed: int, *,
              M_b: int | None = None, plan: ImputationPlan | None = None,
              variance: str = "both", truth: OracleTruth | None = None,
              n_oracle: int = 2_000_000, threads: int | None = None,
              alpha: float = 0.05, progress: bool = False) -> StudyReport:
    """R independent simulated trials through the full pipeline.

    Per trial: generate, impute M times, estimate all six parameters on the
    all-patients subset, then attach bootstrap (B replicates of M_b
    imputations each) and Rubin intervals per `variance`.  Aggregates bias,
    mean SE and coverage against the oracle truth.  Fully deterministic in
    (cfg, R, M, B, seed) for any thread count; failed trials are excluded
    and counted.
    """
    t0 = time.monotonic()
    cfg.validate()
    if R < 1:
        raise ConfigError("R must be at least 1")
    if variance not in ("both", "bootstrap", "rubin", "none"):
        raise ConfigError(f"unknown variance method {variance!r}")
    if B < 2 and variance in ("both", "bootstrap"):
        raise ConfigError("bootstrap needs B >= 2")
    plan = plan or ImputationPlan(mode=FULL)
    M_b = M if M_b is None else M_b
    if truth is None:
        truth = oracle_truth(cfg, n_oracle, derive_seed(seed, _TAG_ORACLE))

    tasks = [(cfg, r, seed, M, B, M_b, plan, variance, alpha) for r in range(R)]
    results: list[dict | None] = [None] * R
    threads = _resolve_threads(threads)
    if threads <= 1:
        for r, task in enumerate(tasks):
            results[r] = _trial_task(task)
            if progress and (r + 1) % max(1, R // 20) == 0:
                print(f"  trial {r + 1}/{R}", flush=True)
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=threads) as pool:
            done = 0
            for res in pool.map(_trial_task, tasks, chunksize=max(1, R // (4 * threads))):
                results[res["r"]] = res
                done += 1
                if progress and done % max(1, R // 20) == 0:
                    print(f"  trial {done}/{R}", flush=True)

    ok = [res for res in results if res["failed"] is None]
    failures = [res["failed"] for res in results if res["failed"] is not None]
    if not ok:
        raise ImputationError("every replication failed: " + failures[0])

    est = np.vstack([res["est"] for res in ok])
    boot_se = np.vstack([res["boot_se"] for res in ok])
    boot_ci = np.stack([res["boot_ci"] for res in ok])
    rubin_se = np.vstack([res["rubin_se"] for res in ok])
    rubin_ci = np.stack([res["rubin_ci"] for res in ok])
    reject = np.vstack([res["reject"] for res in ok])

    rows = []
    for idx, tgt in enumerate(STUDY_TARGETS):
        true_value = truth.value(tgt.stratum, tgt.treatment)
        mean_est = float(est[:, idx].mean())
        covers = lambda ci: float(np.mean((ci[:, idx, 0] <= true_value)
                                          & (true_value <= ci[:, idx, 1])))
        has_boot = not np.isnan(boot_se[:, idx]).all()
        has_rubin = not np.isnan(rubin_se[:, idx]).all()
        rej = reject[:, idx]
        rows.append(ParameterSummary(
            parameter=tgt.parameter,
            true_value=true_value,
            mean_estimate=mean_est,
            bias=mean_est - true_value,
            boot_se=float(boot_se[:, idx].mean()) if has_boot else float("nan"),
            boot_cp=covers(boot_ci) if has_boot else float("nan"),
            rubin_se=float(rubin_se[:, idx].mean()) if has_rubin else float("nan"),
            rubin_cp=covers(rubin_ci) if has_rubin else float("nan"),
            reject_rate=(float(np.nanmean(rej))
                         if not np.isnan(rej).all() else float("nan")),
        ))
    return StudyReport(rows=rows, R=R, n_failed=len(failures), failures=failures,
                       config=cfg, M=M, B=B, M_b=M_b, seed=seed,
                       plan_mode=plan.mode, variance=variance, alpha=alpha,
                       elapsed_s=time.monotonic() - t0)


def _resolve_threads(threads: int | None) -> int:
    if threads is not None:
        return max(1, threads)
    env = os.environ.get("ADACE_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return os.cpu_count() or 1


def write_study_csv(report: StudyReport, path, include_reject: bool = False) -> None:
    """One row per parameter mirroring the study summary table."""

    def cell(v: float) -> str:
        return "" if np.isnan(v) else repr(float(v))

    header = "parameter,true,estimate,bias,boot_se,boot_cp,rubin_se,rubin_cp"
    if include_reject:
        header += ",reject_rate"
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(header + "\n")
        for row in report.rows:
            cells = [row.parameter, repr(row.true_value), repr(row.mean_estimate),
                     repr(row.bias), cell(row.boot_se), cell(row.boot_cp),
                     cell(row.rubin_se), cell(row.rubin_cp)]
            if include_reject:
                # the null-hypothesis test is only meaningful for the
                # both-adherers difference
                cells.append(cell(row.reject_rate)
                             if row.parameter == "mu_d_++" else "")
            fh.write(",".join(cells) + "\n")
