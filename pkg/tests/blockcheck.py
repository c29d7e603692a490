"""Frozen-state conjugacy oracles for every sampler block.

Each check freezes a small, fully hand-specified chain state on a
three-subject dataset, re-runs one block update 100,000 times from that
frozen state, and compares the sampled values against an independently
coded reference: scipy closed forms for the conjugate updates, direct
enumeration for the label draws, and numeric quadrature of the
unnormalized density for the frailties. The posterior algebra here is
written from scratch with explicit loops — none of the package's vectorized
update code is reused on the oracle side.

Shared by the unit suite and the acceptance run (results are cached).
"""

import time
from functools import lru_cache

import numpy as np
import scipy.stats as sps
from scipy.integrate import cumulative_trapezoid
from scipy.special import logsumexp

from recurstrata.data import Dataset, SubjectRecord
from recurstrata.gibbs import GibbsEngine
from recurstrata.model import ChainState, Hyperparameters, ModelVariant, _STATE_FIELDS
from recurstrata.rng import RngStream

N_DRAWS = 100_000

HP = Hyperparameters(
    K=2, L=2,
    a_alpha=2.0, b_alpha=1.0,
    a_tau=3.0, b_tau=2.0,
    a_sigma=3.0, b_sigma=2.0,
    beta_prior_scale=2.0,
    mu_gamma=(0.2, -0.1), sigma_gamma=(1.5, 1.2), rho=0.6,
    mu_psi=0.1, sigma_psi=1.1,
)


def toy_dataset():
    return Dataset(subjects=(
        SubjectRecord("a", 500.0, True, False, 1, np.array([0.3]),
                      np.array([100.0, 250.0])),
        SubjectRecord("b", 320.0, True, False, 0, np.array([-0.7]),
                      np.array([80.0])),
        SubjectRecord("c", 410.0, False, True, 1, np.array([1.2]),
                      np.array([])),
    ))


def frozen_state(empty_cluster=False):
    """Hand-specified state; ``empty_cluster`` empties cluster 1 entirely."""
    if empty_cluster:
        G = np.array([0, 0, 0], dtype=np.int64)
        H = np.array([0, 0, 1, 0, 0, 1], dtype=np.int64)
    else:
        G = np.array([0, 1, 0], dtype=np.int64)
        H = np.array([0, 1, 1, 0, 1, 0], dtype=np.int64)
    return ChainState(
        iteration=0,
        G=G,
        H=H,
        v_phi=np.array([0.6, 1.0]),
        w_phi=np.array([0.6, 0.4]),
        v_theta=np.array([[0.7, 1.0], [0.3, 1.0]]),
        w_theta=np.array([[0.7, 0.3], [0.3, 0.7]]),
        alpha_phi=1.3,
        alpha_theta=np.array([0.8, 1.7]),
        beta_u=np.array([[0.5, -0.3], [1.2, 0.4]]),
        tau2=np.array([0.4, 0.7]),
        beta_y=np.array([[[0.3, -0.2, 0.1], [-0.4, 0.25, 0.3]],
                         [[0.15, 0.05, -0.3], [0.5, -0.1, 0.2]]]),
        sigma2=np.array([[0.5, 0.8], [0.6, 0.9]]),
        gamma=np.array([[5.8, 6.1], [5.2, 6.4]]),
        psi=np.array([[0.7, 0.5], [0.6, 0.9]]),
        u_value=np.array([np.log(500.0), np.log(320.0), 6.1]),
        y_value=np.array([np.log(100.0), np.log(150.0), 5.7,
                          np.log(80.0), 5.6, 6.2]),
    )


def clone(st: ChainState) -> ChainState:
    return ChainState(iteration=st.iteration, **{
        f: (getattr(st, f).copy() if isinstance(getattr(st, f), np.ndarray)
            else getattr(st, f))
        for f in _STATE_FIELDS
    })


def sample_block(engine, frozen, method, extractors, n=N_DRAWS, seed=0):
    """Re-run one block ``n`` times from ``frozen``; collect scalars."""
    out = {name: np.empty(n) for name in extractors}
    rng = RngStream(seed, (0xB10C,))
    update = getattr(engine, method)
    for i in range(n):
        st = clone(frozen)
        update(st, rng)
        for name, fn in extractors.items():
            out[name][i] = fn(st)
    return out


def ks_statistic(samples, cdf):
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    f = cdf(x)
    hi = np.arange(1, n + 1) / n
    lo = np.arange(0, n) / n
    return float(max(np.max(hi - f), np.max(f - lo)))


def ks_two_sample(a, b):
    return float(sps.ks_2samp(a, b).statistic)


def ks_discrete(samples, probs):
    counts = np.bincount(np.asarray(samples, dtype=int), minlength=len(probs))
    return float(np.max(np.abs(np.cumsum(counts / counts.sum()) - np.cumsum(probs))))


def ks_vs_quadrature(samples, grid, log_density):
    lf = log_density - log_density.max()
    cdf = cumulative_trapezoid(np.exp(lf), grid, initial=0.0)
    cdf /= cdf[-1]
    return ks_statistic(samples, lambda x: np.interp(x, grid, cdf))


# ------------------------------------------------------------------ oracles
# Everything below recomputes posterior quantities with plain loops, straight
# from the conjugate algebra.

def _rows_of(fd, i):
    return range(fd.row_start[i], fd.row_start[i] + fd.n_gaps[i] + 1)


def _mu_u(st, fd, i, k):
    return float(fd.X_u[i] @ st.beta_u[k] + st.gamma[k, fd.z[i]])


def _mu_y(st, fd, row, k, l):
    return float(fd.X_y[row] @ st.beta_y[k, l]
                 + st.psi[k, l] * st.gamma[k, fd.z_row[row]])


def oracle_label_probs(st, fd, K, L):
    """Joint enumeration of P(G_i = k) and the marginal P(H_row = l)."""
    pG = np.zeros((fd.n, K))
    pH_given = np.zeros((fd.m, K, L))
    for i in range(fd.n):
        for k in range(K):
            lp = np.log(st.w_phi[k]) + sps.norm.logpdf(
                st.u_value[i], _mu_u(st, fd, i, k), np.sqrt(st.tau2[k]))
            for row in _rows_of(fd, i):
                terms = [
                    np.log(st.w_theta[k, l]) + sps.norm.logpdf(
                        st.y_value[row], _mu_y(st, fd, row, k, l),
                        np.sqrt(st.sigma2[k, l]))
                    for l in range(L)
                ]
                lp += logsumexp(terms)
                pr = np.exp(np.array(terms) - logsumexp(terms))
                pH_given[row, k] = pr
            pG[i, k] = lp
    pG = np.exp(pG - logsumexp(pG, axis=1, keepdims=True))
    pH = np.zeros((fd.m, L))
    for row in range(fd.m):
        i = fd.subject_of_row[row]
        for k in range(K):
            pH[row] += pG[i, k] * pH_given[row, k]
    return pG, pH


def oracle_survival_ss(st, fd, k):
    """Members, residual sum of squares, and design blocks for cluster k."""
    members = [i for i in range(fd.n) if st.G[i] == k]
    ss = sum(
        (st.u_value[i] - _mu_u(st, fd, i, k)) ** 2 for i in members
    )
    X = np.array([fd.X_u[i] for i in members]).reshape(len(members), -1)
    ystar = np.array([st.u_value[i] - st.gamma[k, fd.z[i]] for i in members])
    return members, float(ss), X, ystar


def oracle_coef_posterior(X, ystar, noise_var, prior_mean, prior_cov):
    """Textbook Gaussian-linear posterior N(m, V) for one noise variance."""
    d = prior_mean.size
    Sinv = np.linalg.inv(prior_cov)
    if X.size:
        prec = X.T @ X / noise_var + Sinv
        rhs = X.T @ ystar / noise_var + Sinv @ prior_mean
    else:
        prec = Sinv
        rhs = Sinv @ prior_mean
    V = np.linalg.inv(prec)
    return V @ rhs, V


def oracle_cells(st, fd, K, L):
    cells = {}
    for row in range(fd.m):
        k = st.G[fd.subject_of_row[row]]
        cells.setdefault((int(k), int(st.H[row])), []).append(row)
    return cells


def oracle_recurrent_ss(st, fd, k, l):
    rows = oracle_cells(st, fd, 2, 2).get((k, l), [])
    ss = sum((st.y_value[r] - _mu_y(st, fd, r, k, l)) ** 2 for r in rows)
    X = np.array([fd.X_y[r] for r in rows]).reshape(len(rows), -1)
    ystar = np.array([
        st.y_value[r] - st.psi[k, l] * st.gamma[k, fd.z_row[r]] for r in rows
    ])
    return rows, float(ss), X, ystar


def oracle_frailty_moments(st, fd, hp, k, zv, gamma_other):
    """Conditional N(m, v) of γ_k^z given the other-arm value (explicit sums)."""
    sg = np.asarray(hp.sigma_gamma)
    mg = np.asarray(hp.mu_gamma)
    rho = hp.rho
    other = 1 - zv
    cond_mean = mg[zv] + rho * sg[zv] / sg[other] * (gamma_other - mg[other])
    cond_var = (1.0 - rho * rho) * sg[zv] ** 2
    prec = 1.0 / cond_var
    num = cond_mean / cond_var
    for i in range(fd.n):
        if st.G[i] == k and fd.z[i] == zv:
            prec += 1.0 / st.tau2[k]
            num += (st.u_value[i] - fd.X_u[i] @ st.beta_u[k]) / st.tau2[k]
    for row in range(fd.m):
        kg = st.G[fd.subject_of_row[row]]
        if kg == k and fd.z_row[row] == zv:
            l = st.H[row]
            ps = st.psi[k, l]
            s2 = st.sigma2[k, l]
            prec += ps * ps / s2
            num += ps * (st.y_value[row] - fd.X_y[row] @ st.beta_y[k, l]) / s2
    return num / prec, 1.0 / prec


def oracle_frailty_log_density(g, st, fd, hp, k, zv, gamma_other):
    """Unnormalized log posterior of γ_k^z on a grid, from the model itself."""
    sg = np.asarray(hp.sigma_gamma)
    mg = np.asarray(hp.mu_gamma)
    rho = hp.rho
    other = 1 - zv
    cond_mean = mg[zv] + rho * sg[zv] / sg[other] * (gamma_other - mg[other])
    cond_sd = np.sqrt((1.0 - rho * rho)) * sg[zv]
    lf = sps.norm.logpdf(g, cond_mean, cond_sd)
    for i in range(fd.n):
        if st.G[i] == k and fd.z[i] == zv:
            lf = lf + sps.norm.logpdf(
                st.u_value[i], fd.X_u[i] @ st.beta_u[k] + g, np.sqrt(st.tau2[k]))
    for row in range(fd.m):
        kg = st.G[fd.subject_of_row[row]]
        if kg == k and fd.z_row[row] == zv:
            l = st.H[row]
            lf = lf + sps.norm.logpdf(
                st.y_value[row],
                fd.X_y[row] @ st.beta_y[k, l] + st.psi[k, l] * g,
                np.sqrt(st.sigma2[k, l]))
    return lf


def oracle_modulation_moments(st, fd, hp, k, l):
    prec = 1.0 / hp.sigma_psi ** 2
    num = hp.mu_psi / hp.sigma_psi ** 2
    for row in oracle_cells(st, fd, 2, 2).get((k, l), []):
        gam = st.gamma[k, fd.z_row[row]]
        resid = st.y_value[row] - fd.X_y[row] @ st.beta_y[k, l]
        prec += gam * gam / st.sigma2[k, l]
        num += gam * resid / st.sigma2[k, l]
    return num / prec, 1.0 / prec


# --------------------------------------------------------------- the suite

@lru_cache(maxsize=2)
def run_suite(n_draws=N_DRAWS):
    """Return ({check_name: ks_value}, elapsed_seconds)."""
    t0 = time.perf_counter()
    data = toy_dataset()
    engine = GibbsEngine(data, HP, ModelVariant.EDDPM)
    fd = engine.fd
    st1 = frozen_state()
    st2 = frozen_state(empty_cluster=True)
    hp = HP
    ks = {}

    # ---- terminal imputation (subject c is the censored one)
    s = sample_block(engine, st1, "impute_terminal",
                     {"u_c": lambda st: st.u_value[2]}, n_draws, seed=101)
    mu = _mu_u(st1, fd, 2, st1.G[2])
    sd = np.sqrt(st1.tau2[st1.G[2]])
    lo = np.log(410.0)
    ks["terminal-imputation"] = ks_statistic(
        s["u_c"], sps.truncnorm((lo - mu) / sd, np.inf, loc=mu, scale=sd).cdf)

    # ---- open-gap imputation (one open row per subject)
    s = sample_block(engine, st1, "impute_open_gap",
                     {f"row{r}": (lambda st, r=r: st.y_value[r])
                      for r in fd.open_row}, n_draws, seed=102)
    for i, r in enumerate(fd.open_row):
        k = st1.G[i]
        l = st1.H[r]
        mu = _mu_y(st1, fd, r, k, l)
        sd = np.sqrt(st1.sigma2[k, l])
        lo = fd.open_lower[i]
        ks[f"open-gap-imputation-subject{i}"] = ks_statistic(
            s[f"row{r}"], sps.truncnorm((lo - mu) / sd, np.inf, loc=mu, scale=sd).cdf)

    # ---- joint label update, against direct enumeration
    ex = {f"G{i}": (lambda st, i=i: st.G[i]) for i in range(fd.n)}
    ex.update({f"H{r}": (lambda st, r=r: st.H[r]) for r in range(fd.m)})
    s = sample_block(engine, st1, "update_labels", ex, n_draws, seed=103)
    pG, pH = oracle_label_probs(st1, fd, engine.K, engine.L)
    for i in range(fd.n):
        ks[f"labels-G-subject{i}"] = ks_discrete(s[f"G{i}"], pG[i])
    for r in range(fd.m):
        ks[f"labels-H-row{r}"] = ks_discrete(s[f"H{r}"], pH[r])

    # ---- stick-breaking fractions
    s = sample_block(engine, st1, "update_weights",
                     {"v_phi0": lambda st: st.v_phi[0],
                      "v_th00": lambda st: st.v_theta[0, 0],
                      "v_th10": lambda st: st.v_theta[1, 0]}, n_draws, seed=104)
    n_k = [2, 1]                                    # from G = [0, 1, 0]
    c = {(0, 0): 2, (0, 1): 2, (1, 0): 1, (1, 1): 1}  # from (G, H) cells
    ks["sticks-phi"] = ks_statistic(
        s["v_phi0"], sps.beta(1 + n_k[0], st1.alpha_phi + n_k[1]).cdf)
    ks["sticks-theta-k0"] = ks_statistic(
        s["v_th00"], sps.beta(1 + c[(0, 0)], st1.alpha_theta[0] + c[(0, 1)]).cdf)
    ks["sticks-theta-k1"] = ks_statistic(
        s["v_th10"], sps.beta(1 + c[(1, 0)], st1.alpha_theta[1] + c[(1, 1)]).cdf)

    # ---- concentration parameters
    s = sample_block(engine, st1, "update_concentrations",
                     {"a_phi": lambda st: st.alpha_phi,
                      "a_th0": lambda st: st.alpha_theta[0],
                      "a_th1": lambda st: st.alpha_theta[1]}, n_draws, seed=105)
    ks["concentration-phi"] = ks_statistic(
        s["a_phi"],
        sps.gamma(hp.a_alpha + 1, scale=1.0 / (hp.b_alpha - np.log(1 - 0.6))).cdf)
    ks["concentration-theta-k0"] = ks_statistic(
        s["a_th0"],
        sps.gamma(hp.a_alpha + 1, scale=1.0 / (hp.b_alpha - np.log(1 - 0.7))).cdf)
    ks["concentration-theta-k1"] = ks_statistic(
        s["a_th1"],
        sps.gamma(hp.a_alpha + 1, scale=1.0 / (hp.b_alpha - np.log(1 - 0.3))).cdf)

    # ---- survival atoms: variance closed form, coefficients as the exact
    #      scale mixture (oracle re-draws the variance, then the coefficient)
    s = sample_block(engine, st1, "update_survival_atoms",
                     {"tau2_0": lambda st: st.tau2[0],
                      "tau2_1": lambda st: st.tau2[1],
                      "bu_00": lambda st: st.beta_u[0, 0],
                      "bu_01": lambda st: st.beta_u[0, 1],
                      "bu_10": lambda st: st.beta_u[1, 0]}, n_draws, seed=106)
    prior_mu_u = np.zeros(2)
    prior_cov_u = hp.beta_prior_scale ** 2 * np.eye(2)
    gen = np.random.default_rng(2601)
    for k, names in ((0, ("bu_00", "bu_01")), (1, ("bu_10",))):
        members, ss, X, ystar = oracle_survival_ss(st1, fd, k)
        a_post = hp.a_tau + 0.5 * len(members)
        b_post = hp.b_tau + 0.5 * ss
        ks[f"survival-variance-k{k}"] = ks_statistic(
            s[f"tau2_{k}"], sps.invgamma(a_post, scale=b_post).cdf)
        tau_draws = sps.invgamma(a_post, scale=b_post).rvs(n_draws, random_state=gen)
        coef = np.empty((n_draws, 2))
        for m_i, tv in enumerate(tau_draws):
            mean, V = oracle_coef_posterior(X, ystar, tv, prior_mu_u, prior_cov_u)
            coef[m_i] = gen.multivariate_normal(mean, V, method="cholesky")
        for j, nm in enumerate(names):
            ks[f"survival-coef-k{k}-{nm}"] = ks_two_sample(s[nm], coef[:, j])

    # ---- survival atoms, empty cluster: draws fall back to the base measure
    s = sample_block(engine, st2, "update_survival_atoms",
                     {"tau2_1": lambda st: st.tau2[1],
                      "bu_10": lambda st: st.beta_u[1, 0]}, n_draws, seed=107)
    ks["survival-empty-variance"] = ks_statistic(
        s["tau2_1"], sps.invgamma(hp.a_tau, scale=hp.b_tau).cdf)
    ks["survival-empty-coef"] = ks_statistic(
        s["bu_10"], sps.norm(0.0, hp.beta_prior_scale).cdf)

    # ---- recurrent atoms (cell (0,0)), plus the empty-cell base measure
    s = sample_block(engine, st1, "update_recurrent_atoms",
                     {"s2_00": lambda st: st.sigma2[0, 0],
                      "by_000": lambda st: st.beta_y[0, 0, 0],
                      "by_002": lambda st: st.beta_y[0, 0, 2]}, n_draws, seed=108)
    rows, ss, X, ystar = oracle_recurrent_ss(st1, fd, 0, 0)
    a_post = hp.a_sigma + 0.5 * len(rows)
    b_post = hp.b_sigma + 0.5 * ss
    ks["recurrent-variance-cell00"] = ks_statistic(
        s["s2_00"], sps.invgamma(a_post, scale=b_post).cdf)
    prior_mu_y = np.zeros(3)
    prior_cov_y = hp.beta_prior_scale ** 2 * np.eye(3)
    sig_draws = sps.invgamma(a_post, scale=b_post).rvs(n_draws, random_state=gen)
    coef = np.empty((n_draws, 3))
    for m_i, sv in enumerate(sig_draws):
        mean, V = oracle_coef_posterior(X, ystar, sv, prior_mu_y, prior_cov_y)
        coef[m_i] = gen.multivariate_normal(mean, V, method="cholesky")
    ks["recurrent-coef-cell00-x"] = ks_two_sample(s["by_000"], coef[:, 0])
    ks["recurrent-coef-cell00-z"] = ks_two_sample(s["by_002"], coef[:, 2])

    s = sample_block(engine, st2, "update_recurrent_atoms",
                     {"s2_10": lambda st: st.sigma2[1, 0],
                      "by_101": lambda st: st.beta_y[1, 0, 1]}, n_draws, seed=109)
    ks["recurrent-empty-variance"] = ks_statistic(
        s["s2_10"], sps.invgamma(hp.a_sigma, scale=hp.b_sigma).cdf)
    ks["recurrent-empty-coef"] = ks_statistic(
        s["by_101"], sps.norm(0.0, hp.beta_prior_scale).cdf)

    # ---- frailties: first arm against quadrature of the model's density,
    #      second arm (which conditions on the freshly drawn first arm) as a
    #      two-sample comparison with a from-scratch sequential sampler
    s = sample_block(engine, st1, "update_frailties",
                     {"g00": lambda st: st.gamma[0, 0],
                      "g01": lambda st: st.gamma[0, 1],
                      "g10": lambda st: st.gamma[1, 0],
                      "g11": lambda st: st.gamma[1, 1]}, n_draws, seed=110)
    for k in (0, 1):
        grid = np.linspace(-25.0, 25.0, 400_001)
        lf = oracle_frailty_log_density(grid, st1, fd, hp, k, 0, st1.gamma[k, 1])
        ks[f"frailty-quadrature-k{k}-z0"] = ks_vs_quadrature(s[f"g{k}0"], grid, lf)
        m0, v0 = oracle_frailty_moments(st1, fd, hp, k, 0, st1.gamma[k, 1])
        g0 = gen.normal(m0, np.sqrt(v0), size=n_draws)
        m1 = np.empty(n_draws)
        sd1 = np.empty(n_draws)
        for m_i, g in enumerate(g0):
            mm, vv = oracle_frailty_moments(st1, fd, hp, k, 1, g)
            m1[m_i] = mm
            sd1[m_i] = np.sqrt(vv)
        ks[f"frailty-sequential-k{k}-z1"] = ks_two_sample(
            s[f"g{k}1"], gen.normal(m1, sd1))

    # ---- modulation factors: hand moments for an occupied and an empty cell
    s = sample_block(engine, st1, "update_modulation",
                     {"psi00": lambda st: st.psi[0, 0]}, n_draws, seed=111)
    m_psi, v_psi = oracle_modulation_moments(st1, fd, hp, 0, 0)
    ks["modulation-cell00"] = ks_statistic(
        s["psi00"], sps.norm(m_psi, np.sqrt(v_psi)).cdf)
    s = sample_block(engine, st2, "update_modulation",
                     {"psi11": lambda st: st.psi[1, 1]}, n_draws, seed=112)
    ks["modulation-empty-cell"] = ks_statistic(
        s["psi11"], sps.norm(hp.mu_psi, hp.sigma_psi).cdf)

    return ks, time.perf_counter() - t0
