"""Shared fixtures and small data builders for the test suite."""

import numpy as np
import pytest

from recurstrata.data import Dataset, SubjectRecord
from recurstrata.gibbs import FitData, fit_with_escalation
from recurstrata.model import Hyperparameters, ModelVariant
from recurstrata.simulate import DgpConfig, simulate_dataset


def make_record(
    sid="s1",
    followup=500.0,
    death=True,
    treatment=0,
    covariates=(0.3,),
    events=(100.0, 250.0),
):
    return SubjectRecord(
        subject_id=sid,
        followup_time=followup,
        death_observed=death,
        censored=not death,
        treatment=treatment,
        covariates=np.asarray(covariates, dtype=float),
        event_times=np.asarray(events, dtype=float),
    )


def make_toy_dataset():
    """Three subjects (two deaths, one censored) with 2, 1, and 0 events."""
    return Dataset(subjects=(
        make_record("a", followup=500.0, death=True, treatment=1,
                    covariates=(0.3,), events=(100.0, 250.0)),
        make_record("b", followup=320.0, death=True, treatment=0,
                    covariates=(-0.7,), events=(80.0,)),
        make_record("c", followup=410.0, death=False, treatment=1,
                    covariates=(1.2,), events=()),
    ))


def small_dgp(n=80, **kw):
    return DgpConfig(n=n, **kw)


@pytest.fixture(scope="session")
def small_fit():
    """A real (dataset, draws, diagnostics, hyper, FitData) quintuple.

    Sized so LPML is computable (>= 100 draws) while the whole fit stays in
    the low seconds; shared across estimand and assessment tests.
    """
    data, _ = simulate_dataset(small_dgp(n=80), seed=424242)
    hp = Hyperparameters(K=8, L=5, n_iter=760, n_burnin=200, thin=5)
    draws, diag, hp_used = fit_with_escalation(data, hp, ModelVariant.EDDPM, seed=5150)
    fd = FitData.build(data, hp_used, ModelVariant.EDDPM)
    return {"data": data, "draws": draws, "diag": diag, "hyper": hp_used, "fd": fd}
