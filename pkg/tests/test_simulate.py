"""Generator and oracle-truth tests.

The deterministic-configuration tests pin the generative equations exactly:
with a single mixture component, zero covariate effects, and zero residual
and frailty variance, every quantity collapses to a closed form that is
computed independently here.
"""

import numpy as np
import pytest

from recurstrata.simulate import (
    DgpConfig,
    EstimandError,
    TrueEstimandTable,
    oracle_true_estimands,
    simulate_dataset,
)


def deterministic_config(**kw):
    base = dict(
        n=4,
        mixture_weights_u=[1.0],
        mixture_weights_y=[1.0],
        covariate_effects_u=[[0.0]],
        covariate_effects_y=[[0.0]],
        treatment_effects_u=[0.4],
        treatment_effects_y=[0.2],
        frailty_var=0.0,
        residual_var=0.0,
        censor_low=3000.0,
        censor_high=3001.0,
    )
    base.update(kw)
    return DgpConfig(**base)


# ------------------------------------------------------------ validation

def test_config_rejects_bad_weights():
    with pytest.raises(ValueError):
        DgpConfig(mixture_weights_u=[0.5, 0.4])
    with pytest.raises(ValueError):
        DgpConfig(mixture_weights_u=[-0.1, 1.1, 0.0])


def test_config_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        DgpConfig(treatment_effects_u=[1.0, 0.5])    # needs 3 entries


def test_config_rejects_bad_correlation_and_window():
    with pytest.raises(ValueError):
        DgpConfig(frailty_corr=1.0)
    with pytest.raises(ValueError):
        DgpConfig(censor_low=500.0, censor_high=400.0)


def test_config_json_round_trip():
    cfg = DgpConfig(n=50, frailty_corr=0.25)
    back = DgpConfig.from_jsonable(cfg.to_jsonable())
    assert back.n == 50
    assert back.frailty_corr == 0.25
    assert np.array_equal(back.mixture_weights_u, cfg.mixture_weights_u)


# ------------------------------------------------- deterministic closed form

def test_deterministic_terminal_times():
    # zero noise, unit frailty (exp(0)): D^z = exp(6.5 + 0.4 z + 1) exactly
    ds, lat = simulate_dataset(deterministic_config(), seed=5)
    assert np.allclose(lat.gamma0, 1.0) and np.allclose(lat.gamma1, 1.0)
    for s in ds.subjects:
        want = np.exp(6.5 + 0.4 * s.treatment + 1.0)
        assert s.followup_time == pytest.approx(want, rel=1e-12)
        assert s.death_observed


def test_deterministic_gap_times_and_counts():
    # gap = exp(5.0 + 0.2 z + 0.1 * 1) exactly; events at integer multiples
    ds, _ = simulate_dataset(deterministic_config(), seed=5)
    for s in ds.subjects:
        gap = np.exp(5.0 + 0.2 * s.treatment + 0.1)
        want_n = int(np.ceil(s.followup_time / gap)) - 1
        assert s.n_events == want_n
        assert np.allclose(s.event_times, gap * np.arange(1, want_n + 1), rtol=1e-10)


def test_censoring_truncates_terminal():
    ds, lat = simulate_dataset(DgpConfig(n=400), seed=31)
    d = {0: None}
    for i, s in enumerate(ds.subjects):
        death_time = lat.terminal1[i] if s.treatment else lat.terminal0[i]
        cens = lat.censoring[i]
        assert 300.0 <= cens <= 1000.0
        assert s.followup_time == pytest.approx(min(death_time, cens), rel=1e-12)
        assert s.death_observed == (death_time <= cens)
        if s.n_events:
            assert s.event_times[-1] < s.followup_time
            assert np.all(np.diff(s.event_times) > 0)


def test_simulate_deterministic_in_seed():
    a, _ = simulate_dataset(DgpConfig(n=60), seed=9)
    b, _ = simulate_dataset(DgpConfig(n=60), seed=9)
    c, _ = simulate_dataset(DgpConfig(n=60), seed=10)
    assert all(np.array_equal(x.event_times, y.event_times)
               for x, y in zip(a.subjects, b.subjects))
    assert a.subjects[0].followup_time == b.subjects[0].followup_time
    assert any(not np.array_equal(x.event_times, y.event_times)
               or x.followup_time != y.followup_time
               for x, y in zip(a.subjects, c.subjects))


def test_frailty_moments():
    _, lat = simulate_dataset(DgpConfig(n=40_000), seed=77)
    lg0 = np.log(lat.gamma0)
    lg1 = np.log(lat.gamma1)
    assert lg0.var() == pytest.approx(0.2, abs=0.01)
    assert lg1.var() == pytest.approx(0.2, abs=0.01)
    assert np.corrcoef(lg0, lg1)[0, 1] == pytest.approx(0.5, abs=0.02)


def test_frailty_correlation_follows_config():
    _, lat = simulate_dataset(DgpConfig(n=40_000, frailty_corr=0.9), seed=78)
    assert np.corrcoef(np.log(lat.gamma0), np.log(lat.gamma1))[0, 1] == pytest.approx(
        0.9, abs=0.02)


# ------------------------------------------------------------ oracle truth

def test_oracle_frozen_reference_values():
    t = oracle_true_estimands(
        DgpConfig(n=500), [(300.0, 500.0), (500.0, 500.0)], n_mc=100_000, seed=99)
    assert t.mu0[0] == pytest.approx(1.243441060784234, abs=1e-9)
    assert t.mu1[0] == pytest.approx(0.6679473662868497, abs=1e-9)
    assert t.sanr[0] == pytest.approx(0.5371765396468229, abs=1e-9)
    assert t.as_rate[0] == pytest.approx(0.98644, abs=1e-9)
    assert t.mu0[1] == pytest.approx(2.3175053728559263, abs=1e-9)
    assert t.sanr[1] == pytest.approx(0.5821974734042553, abs=1e-9)


def test_oracle_two_seed_agreement():
    grid = [(300.0, 500.0)]
    a = oracle_true_estimands(DgpConfig(n=500), grid, n_mc=60_000, seed=1)
    b = oracle_true_estimands(DgpConfig(n=500), grid, n_mc=60_000, seed=2)
    for field in ("mu0", "mu1"):
        se = np.hypot(getattr(a, f"se_{field}")[0], getattr(b, f"se_{field}")[0])
        assert abs(getattr(a, field)[0] - getattr(b, field)[0]) < 5 * se


def test_oracle_monotone_in_t_and_r():
    grid = [(200.0, 500.0), (400.0, 500.0), (400.0, 800.0)]
    t = oracle_true_estimands(DgpConfig(n=500), grid, n_mc=30_000, seed=3)
    assert t.mu0[0] < t.mu0[1]            # more time, more events
    assert t.as_rate[1] > t.as_rate[2]    # later r, smaller always-survivor stratum


def test_oracle_null_effect_gives_unit_sanr():
    cfg = DgpConfig(
        n=500,
        treatment_effects_u=[0.0, 0.0, 0.0],
        treatment_effects_y=[0.0, 0.0, 0.0],
    )
    t = oracle_true_estimands(cfg, [(300.0, 500.0)], n_mc=60_000, seed=4)
    assert abs(t.sanr[0] - 1.0) < 5 * t.se_sanr[0]


def test_oracle_rejects_bad_grid_and_empty_stratum():
    with pytest.raises(EstimandError):
        oracle_true_estimands(DgpConfig(n=10), [(300.0, -1.0)], n_mc=100, seed=0)
    with pytest.raises(EstimandError):
        oracle_true_estimands(DgpConfig(n=10), [(100.0, 1e9)], n_mc=500, seed=0)


def test_truth_table_lookup_and_json_round_trip(tmp_path):
    t = oracle_true_estimands(DgpConfig(n=100), [(300.0, 500.0)], n_mc=2000, seed=6)
    row = t.lookup(300.0, 500.0)
    assert set(row) == {"mu0", "mu1", "sanr", "as_rate", "se_mu0", "se_mu1", "se_sanr"}
    with pytest.raises(KeyError):
        t.lookup(1.0, 2.0)
    t.to_json(tmp_path / "truth.json", extra={"note": 1})
    back = TrueEstimandTable.from_json(tmp_path / "truth.json")
    assert back.lookup(300.0, 500.0)["mu0"] == pytest.approx(row["mu0"], rel=1e-12)
    assert back.n_mc == 2000
