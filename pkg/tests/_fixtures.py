"""Shared fixture builders for the test suite."""

from __future__ import annotations

import numpy as np

from adace.imputation import ImputedDataset
from adace.trial_data import TrialDataset


def make_imputed(arm, a0, a1, y0, y1, m=0, z=None, i_flags=None):
    """Hand-built completed dataset for estimator tests.

    Adherence flags default to the stated A values repeated across periods so
    that a == prod(i) holds.
    """
    arm = np.asarray(arm, dtype=np.int8)
    n = arm.size
    a = np.vstack([np.asarray(a0, dtype=np.int8), np.asarray(a1, dtype=np.int8)])
    y = np.vstack([np.asarray(y0, dtype=np.float64), np.asarray(y1, dtype=np.float64)])
    k1 = 3
    if i_flags is None:
        i_flags = np.repeat(a[:, :, None], k1, axis=2).astype(np.int8)
    if z is None:
        z = np.zeros((2, n, k1))
    rows = np.arange(n)
    observed_z = np.zeros((2, n, k1), dtype=bool)
    observed_i = np.zeros((2, n, k1), dtype=bool)
    observed_y = np.zeros((2, n), dtype=bool)
    observed_z[arm, rows] = True
    observed_i[arm, rows] = True
    observed_y[arm, rows] = True
    return ImputedDataset(
        m=m, plan_mode="full", rng_stream_id="test",
        subject_ids=tuple(f"s{j}" for j in range(n)), arm=arm,
        z=z, i_flags=i_flags, a=a, y=y,
        observed_z=observed_z, observed_i=observed_i, observed_y=observed_y)


def assert_completed_invariants(ds: TrialDataset, imp) -> None:
    """Observed-cell preservation, completeness, monotone imputed adherence."""
    rows = np.arange(ds.n)
    own_z = imp.z[ds.arm, rows]
    keep = ~np.isnan(ds.z)
    assert np.array_equal(own_z[keep], ds.z[keep])
    own_y = imp.y[ds.arm, rows]
    keep_y = ~np.isnan(ds.y)
    assert np.array_equal(own_y[keep_y], ds.y[keep_y])
    assert np.array_equal(imp.i_flags[ds.arm, rows].astype(float), ds.i_flags)
    assert np.isfinite(imp.z).all() and np.isfinite(imp.y).all()
    for t in (0, 1):
        iflags = imp.i_flags[t]
        assert (np.diff(iflags.astype(int), axis=1) <= 0).all()
        assert np.array_equal(imp.a[t], iflags.min(axis=1))


def random_trial_fixture(rng, n_per_arm=12, K=4, p=1, adhere_prob=0.85,
                         forced_adherers=7):
    """Small structurally valid trial with enough adherers to fit every model."""
    n = 2 * n_per_arm
    k1 = K - 1
    arm = np.zeros(n, dtype=np.int8)
    arm[n_per_arm:] = 1
    x = rng.normal(0.0, 1.0, (n, p))
    slopes = np.linspace(0.2, 0.5, k1)
    z = (1.0 + x[:, :1].sum(axis=1, keepdims=True) * 0.5 + 0.3 * arm[:, None]
         + rng.normal(0.0, 0.5, (n, k1)))
    y = 0.5 - 0.4 * x[:, 0] + 0.2 * arm + z @ slopes + rng.normal(0.0, 0.3, n)

    i_flags = np.zeros((n, k1))
    at_risk = np.ones(n, dtype=bool)
    for k in range(k1):
        stay = (rng.random(n) < adhere_prob) & at_risk
        i_flags[:, k] = stay
        at_risk = stay
    for t in (0, 1):
        rows = np.flatnonzero(arm == t)[:forced_adherers]
        i_flags[rows] = 1.0
    adherent = i_flags.all(axis=1)

    z_obs = z.copy()
    for k in range(1, k1):
        z_obs[i_flags[:, k - 1] == 0, k] = np.nan
    y_obs = np.where(adherent, y, np.nan)
    return TrialDataset(
        subject_ids=[f"f{j:03d}" for j in range(n)],
        arm=arm, x=x, z=z_obs, i_flags=i_flags, y=y_obs)
