import math
import warnings

import numpy as np
import pytest
from scipy import integrate
from scipy.stats import norm

from stratcausal.data import Dataset, load_survey, write_schema
from stratcausal.diagnostics import independence_wald
from stratcausal.simulator import (
    DgpConfig,
    _arm_means,
    _tanh_tail,
    always_buyer_share,
    default_config,
    load_config,
    monte_carlo_study,
    oracle_nuisances,
    oracle_truth,
    outcome_multiplier,
    selection_on_grid,
    simulate,
)


@pytest.fixture(scope="module")
def big():
    return simulate(default_config(n=20000), seed=1)


def test_no_selection_effect():
    sim = simulate(default_config(sel_slope=0.0), seed=0)
    lat = sim.latent
    assert np.array_equal(lat.latent_s0, lat.latent_s)
    assert sim.observed.s0.mean() == 1.0


def test_null_outcome():
    sim = simulate(default_config(q_intercept=0.0, q_x=(), q_w=()), seed=0)
    assert not sim.latent.latent_y.any() and not sim.observed.y.any()


def test_pathwise_monotone_and_y0(big):
    grid = np.linspace(0.0, 0.7, 8)
    S = selection_on_grid(big.config, big.latent, grid)
    assert np.all(np.diff(S, axis=1) >= 0)
    assert np.array_equal(S[:, 0], big.latent.latent_s0.to_numpy())
    assert np.all(big.latent.latent_y0 == 0)
    d = big.latent.latent_d
    assert d.min() > 0 and d.max() <= 0.7


def test_always_buyer_share_matches_analytic(big):
    obs = big.observed
    share = obs.s0.mean()
    mc_se = math.sqrt(share * (1 - share) / obs.n)
    analytic, a_se = always_buyer_share(big.config, R=400000, seed=7)
    assert abs(share - analytic) < 3 * math.hypot(mc_se, a_se)


def test_tanh_tail_against_quadrature():
    for a in (-3.0, -0.5, 0.0, 0.7, 2.5):
        want = integrate.quad(lambda v: math.tanh(v) * norm.pdf(v), a, np.inf)[0]
        assert abs(_tanh_tail(a) - want) < 1e-7


def test_outcome_multiplier_against_quadrature():
    cfg = default_config()
    for alpha in (-1.2, 0.0, 0.8):
        num = integrate.quad(lambda v: (1 + 0.6 * math.tanh(v)) * norm.pdf(v), -alpha, np.inf)[0]
        want = num / norm.sf(-alpha)
        assert outcome_multiplier(cfg, alpha) == pytest.approx(want, abs=1e-6)


def test_arm_means_against_quadrature():
    cfg = default_config()
    s, lo, hi, t = cfg.d_noise, cfg.min_discount, cfg.max_discount, cfg.binarize_threshold
    for g in (0.1, 0.29, 0.55):
        dens = lambda z: norm.pdf(z, g, s)  # noqa: E731
        # clipped draw: mass below lo sits at lo, above hi at hi
        m_lo = lo * norm.cdf(lo, g, s) + integrate.quad(lambda z: z * dens(z), lo, t)[0]
        m_hi = integrate.quad(lambda z: z * dens(z), t, hi)[0] + hi * norm.sf(hi, g, s)
        p_hi = norm.sf(t, g, s)
        up, low, p = _arm_means(cfg, np.array([g]))
        assert up[0] == pytest.approx(m_hi / p_hi, abs=1e-9)
        assert low[0] == pytest.approx(m_lo / (1 - p_hi), abs=1e-9)
        assert p[0] == pytest.approx(p_hi, abs=1e-12)


def test_oracle_theta_bruteforce(big):
    # independent route: average simulated outcome probabilities over latent always buyers
    cfg = default_config()
    truth = oracle_truth(cfg, R=200000, seed=3)
    sim = simulate(default_config(n=400000), seed=11)
    lat = sim.latent
    ab = lat.latent_s0.to_numpy() == 1
    slope = (lat.latent_q * (1 + cfg.v_outcome_loading * np.tanh(lat.latent_v))).to_numpy()[ab]
    bf = slope.mean()
    bf_se = slope.std(ddof=1) / math.sqrt(slope.size)
    assert abs(bf - truth.theta_ab) < 3 * math.hypot(bf_se, truth.theta_se)


def test_oracle_constant_q_analytic():
    cfg = default_config(q_intercept=0.2, q_x=(), q_w=(), v_outcome_loading=0.0)
    t = oracle_truth(cfg, R=1000)
    assert t.theta_ab == 0.2 and t.computed_by == "analytic" and t.theta_se == 0.0


def test_oracle_step_q():
    cfg = default_config(q_intercept=0.1, q_x=(0.2,), q_w=(), sel_x=(0.0, 0.2),
                         v_outcome_loading=0.0)
    t = oracle_truth(cfg, R=200000, seed=1)
    assert t.computed_by.startswith("monte-carlo")
    assert abs(t.theta_ab - 0.2) < 3 * t.theta_se + 1e-12


def test_oracle_r_scaling():
    cfg = default_config()
    a = oracle_truth(cfg, R=50000, seed=0)
    b = oracle_truth(cfg, R=100000, seed=0)
    assert b.theta_se / a.theta_se == pytest.approx(1 / math.sqrt(2), rel=0.1)
    assert b.delta_se / a.delta_se == pytest.approx(1 / math.sqrt(2), rel=0.1)


def test_default_magnitudes():
    t = oracle_truth(default_config(), R=100000)
    assert t.theta_ab == pytest.approx(0.15, abs=0.01)
    assert t.delta_ab_binary == pytest.approx(0.04, abs=0.005)
    assert t.always_buyer_share == pytest.approx(0.48, abs=0.02)
    assert t.monotonicity_slope > 0


def test_config_roundtrip(tmp_path):
    cfg = default_config(n=1234, sel_w=(0.1, -0.2), v_outcome_loading=0.25)
    cfg.save(tmp_path / "c.cfg")
    assert load_config(tmp_path / "c.cfg") == cfg
    with pytest.raises(ValueError, match="unknown"):
        DgpConfig.from_mapping({"bogus": "1"})
    with pytest.raises(ValueError):
        default_config(sel_slope=-1.0)
    with pytest.raises(ValueError):
        default_config(q_intercept=0.9)


def test_csv_roundtrip(tmp_path):
    ds = simulate(default_config(n=1500), seed=4).observed
    ds.to_csv(tmp_path / "s.csv")
    write_schema(ds.schema(), tmp_path / "s.schema")
    back = load_survey(tmp_path / "s.csv", tmp_path / "s.schema")
    for name in ("y", "d", "s0", "X", "W", "upselling"):
        assert np.array_equal(getattr(back, name), getattr(ds, name))
    assert back.x_names == ds.x_names


def test_latent_prefix_and_determinism():
    a = simulate(default_config(n=2000), seed=9)
    b = simulate(default_config(n=2000), seed=9)
    assert all(c.startswith("latent_") for c in a.latent.columns)
    assert a.latent.equals(b.latent)


def test_too_few_buyers():
    with pytest.raises(ValueError, match="buyers"):
        simulate(default_config(n=150), seed=0)


def test_treatment_independent_of_v():
    # the discount depends on X only: a Wald test on V rejects at the nominal rate
    cfg = default_config(n=1500)
    rejections = 0
    reps = 100
    for r in range(reps):
        lat = simulate(cfg, seed=100 + r).latent
        X = lat[[f"latent_x{j}" for j in range(cfg.p_x)]].to_numpy()
        ds = Dataset(y=np.zeros(len(lat)), d=lat.latent_d, s0=lat.latent_s0, X=X,
                     W=lat.latent_v.to_numpy().reshape(-1, 1),
                     x_names=tuple(f"x{j}" for j in range(cfg.p_x)), w_names=("v",))
        rejections += independence_wald(ds).p_values[0] < 0.05
    assert 0.01 <= rejections / reps <= 0.11


def test_oracle_nuisances_shapes(big):
    ab = big.observed.subset(np.flatnonzero(big.observed.s0 == 1))
    nui = oracle_nuisances(big.config, ab)
    assert len(nui) == ab.n
    assert np.all(nui.mu1 >= nui.mu0) and np.all((nui.p1 > 0) & (nui.p1 < 1))


def test_mc_oracle_unbiased():
    cfg = default_config(n=5000)
    st = monte_carlo_study(cfg, 40, "dml_oracle", seed=2)
    assert abs(st.bias) < 3 * st.mc_se
    assert st.n_failed == 0 and len(st.records) == 40


def test_mc_null_selection_coverage():
    cfg = default_config(n=5000, sel_slope=0.0)
    st = monte_carlo_study(cfg, 50, "dml_oracle", seed=3)
    assert 0.88 <= st.coverage <= 0.99


def test_mc_records_failures():
    calls = []

    def flaky(sim, seed, opts):
        calls.append(seed)
        if len(calls) == 2:
            raise RuntimeError("boom")
        return 0.1, 0.01, sim.observed.n, 0

    st = monte_carlo_study(default_config(n=1000), 3, flaky, truth_value=0.1)
    assert st.n_failed == 1 and "boom" in st.records.error.iloc[1]
    with pytest.raises(ValueError):
        monte_carlo_study(default_config(n=1000), 1, "ols")
    with pytest.raises(ValueError):
        monte_carlo_study(default_config(n=1000), 2, "nope")
