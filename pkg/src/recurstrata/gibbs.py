"""Blocked Gibbs sampler for the nested mixture with data augmentation.

One sweep, in order:

  1. impute the censored log terminal times (truncated normal),
  2. impute each subject's open gap (truncated normal),
  3. labels: top-level G_i from the subcluster-marginalized conditional,
     then nested H_ij given the new G_i,
  4. stick fractions for both weight layers (beta conditionals),
  5. concentrations α_φ and α_θ|k (gamma conditionals),
  6. terminal atoms (τ²_k inverse-gamma, then β_u,k multivariate normal),
  7. gap atoms (σ²_{l|k}, then β_y,l|k) over all occupied and empty cells,
  8. frailty pairs γ_k = (γ⁰_k, γ¹_k), one world at a time, conditioning on
     the other world through the cross-world correlation ρ,
  9. modulations ψ_{l|k} (scalar normal conditionals).

Everything is vectorized over subjects/gaps and over cluster cells; empty
cells are refreshed from their base measures, which is the conjugate
posterior with zero data.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import Dataset, derive_gaps, event_index_covariates
from .model import (
    ChainState,
    Hyperparameters,
    ListSink,
    ModelVariant,
    PosteriorDraw,
    TraceDiagnostics,
    stick_breaking_weights,
)
from .rng import (
    NumericalError,
    RngStream,
    sample_gamma,
    sample_inverse_gamma,
    sample_truncated_normal,
)

__all__ = ["FitData", "GibbsEngine", "run_chain", "fit_with_escalation"]

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class FitData:
    """Variant-resolved design matrices and index structures for one dataset.

    Gap rows are stored flat and contiguous per subject, observed gaps first
    and the open gap last; ``row_start`` makes per-subject segment reductions
    a single ``np.add.reduceat``.
    """

    n: int
    m: int
    p: int                      # covariate columns kept in the designs
    q: int                      # gap-level covariate columns (event index)
    d_u: int
    d_y: int
    X_u: np.ndarray             # (n, d_u), treatment column last
    X_y: np.ndarray             # (m, d_y), treatment column last
    X_subject: np.ndarray       # (n, p) covariate part shared by both designs
    z: np.ndarray               # (n,) treatment arm
    z_row: np.ndarray           # (m,)
    subject_of_row: np.ndarray  # (m,)
    row_start: np.ndarray       # (n,)
    open_row: np.ndarray        # (n,) flat index of each subject's open gap
    observed_row: np.ndarray    # (m,) bool, False on open-gap slots
    n_gaps: np.ndarray          # (n,)
    censored: np.ndarray        # (n,) bool
    u_obs: np.ndarray           # (n,) log follow-up (observed terminal if death)
    u_lower: np.ndarray         # (n,) imputation lower bound (= u_obs)
    open_lower: np.ndarray      # (n,) log(followup - last event), floored
    y_obs: np.ndarray           # (m,) observed log gaps; open slots hold the bound

    @classmethod
    def build(cls, data: Dataset, hyper: Hyperparameters, variant: ModelVariant) -> "FitData":
        _, _, drop_cov = variant.resolve(hyper.K, hyper.L)
        n = data.n
        p_full = data.covariate_dim
        p = 0 if drop_cov else p_full
        q = 0 if drop_cov or not hyper.use_event_index_covariate else 1

        n_gaps = np.array([s.n_events for s in data.subjects])
        m = int((n_gaps + 1).sum())
        row_start = np.concatenate([[0], np.cumsum(n_gaps + 1)[:-1]]).astype(np.int64)
        open_row = row_start + n_gaps
        subject_of_row = np.repeat(np.arange(n), n_gaps + 1)
        observed_row = np.ones(m, dtype=bool)
        observed_row[open_row] = False

        z = np.array([s.treatment for s in data.subjects], dtype=np.int64)
        covs = np.stack([s.covariates for s in data.subjects])
        X_subject = covs[:, :p] if p else np.empty((n, 0))

        X_u = np.empty((n, p + 1))
        X_u[:, :p] = X_subject
        X_u[:, p] = z

        X_y = np.empty((m, p + q + 1))
        y_obs = np.empty(m)
        u_obs = np.empty(n)
        open_lower = np.empty(n)
        censored = np.empty(n, dtype=bool)
        for i, s in enumerate(data.subjects):
            rep = derive_gaps(s)
            rows = slice(row_start[i], row_start[i] + n_gaps[i] + 1)
            if p:
                X_y[rows, :p] = X_subject[i]
            if q:
                X_y[rows, p:p + q] = event_index_covariates(s.n_events)
            X_y[rows, p + q] = s.treatment
            y_obs[row_start[i]:row_start[i] + n_gaps[i]] = rep.log_gaps
            y_obs[open_row[i]] = rep.open_gap_lower_bound
            u_obs[i] = rep.log_terminal
            open_lower[i] = rep.open_gap_lower_bound
            censored[i] = s.censored

        return cls(
            n=n, m=m, p=p, q=q, d_u=p + 1, d_y=p + q + 1,
            X_u=X_u, X_y=X_y, X_subject=X_subject, z=z,
            z_row=z[subject_of_row], subject_of_row=subject_of_row,
            row_start=row_start, open_row=open_row, observed_row=observed_row,
            n_gaps=n_gaps, censored=censored, u_obs=u_obs, u_lower=u_obs.copy(),
            open_lower=open_lower, y_obs=y_obs,
        )


def _categorical_rows(logits: np.ndarray, gen) -> np.ndarray:
    """One categorical draw per row from unnormalized log weights."""
    mx = logits.max(axis=1)
    if not np.all(np.isfinite(mx)):
        raise NumericalError("all-zero posterior weights in a label update")
    p = np.exp(logits - mx[:, None])
    cs = np.cumsum(p, axis=1)
    u = gen.random(logits.shape[0]) * cs[:, -1]
    idx = (cs < u[:, None]).sum(axis=1)
    return np.minimum(idx, logits.shape[1] - 1).astype(np.int64)


def _grouped_gram(X: np.ndarray, y: np.ndarray, labels: np.ndarray, ncat: int):
    """Per-group X'X and X'y via a stable sort + segmented reduction."""
    d = X.shape[1]
    order = np.argsort(labels, kind="stable")
    Xs = X[order]
    ys = y[order]
    ls = labels[order]
    present, starts = np.unique(ls, return_index=True)
    XtX = np.zeros((ncat, d, d))
    Xty = np.zeros((ncat, d))
    if present.size:
        outer = Xs[:, :, None] * Xs[:, None, :]
        XtX[present] = np.add.reduceat(outer, starts, axis=0)
        Xty[present] = np.add.reduceat(Xs * ys[:, None], starts, axis=0)
    return XtX, Xty


def _batched_cholesky(P: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        try:
            return np.linalg.cholesky(P + 1e-10 * np.eye(P.shape[-1]))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("precision matrix not SPD after jitter") from exc


def _conjugate_coef_posterior(XtX, Xty, noise_var, prior_prec, prior_prec_mean):
    """Posterior (mean, upper-chol of precision) for β in y = Xβ + ε,
    ε ~ N(0, noise_var), β ~ N(μ₀, Σ₀): precision = X'X + v Σ₀⁻¹ (scaled so
    the draw covariance is v · precision⁻¹)."""
    P = XtX + noise_var[:, None, None] * prior_prec[None]
    rhs = Xty + noise_var[:, None] * prior_prec_mean[None]
    chol = _batched_cholesky(P)
    cholT = np.swapaxes(chol, -1, -2)
    mean = np.linalg.solve(cholT, np.linalg.solve(chol, rhs[..., None]))[..., 0]
    return mean, cholT


def _draw_coef(mean, cholT, scale, gen):
    eps = gen.standard_normal(mean.shape)
    delta = np.linalg.solve(cholT, eps[..., None])[..., 0]
    return mean + scale[:, None] * delta


class GibbsEngine:
    """Sampler for one (dataset, hyperparameters, variant) triple.

    Methods named after the sweep blocks mutate a :class:`ChainState` in
    place and consume randomness only through the passed stream.
    """

    def __init__(self, data: Dataset, hyper: Hyperparameters, variant: ModelVariant):
        self.hp = hyper
        self.variant = ModelVariant(variant)
        self.K, self.L, _ = self.variant.resolve(hyper.K, hyper.L)
        self.fd = FitData.build(data, hyper, self.variant)
        fd = self.fd

        def _resolve(mean, cov, d, label):
            mu = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
            Sig = (hyper.beta_prior_scale ** 2) * np.eye(d) if cov is None \
                else np.asarray(cov, dtype=float)
            if mu.shape != (d,) or Sig.shape != (d, d):
                raise ValueError(f"{label} prior shape mismatch (design dim {d})")
            Sinv = np.linalg.inv(Sig)
            return mu, Sig, Sinv, Sinv @ mu

        (self.mu_bu, self.Sig_bu, self.Sinv_bu, self.Sinv_mu_bu) = _resolve(
            hyper.beta_u_prior_mean, hyper.beta_u_prior_cov, fd.d_u, "beta_u")
        (self.mu_by, self.Sig_by, self.Sinv_by, self.Sinv_mu_by) = _resolve(
            hyper.beta_y_prior_mean, hyper.beta_y_prior_cov, fd.d_y, "beta_y")

        s0, s1 = hyper.sigma_gamma
        r = hyper.rho
        self.gamma_prior_cov = np.array(
            [[s0 * s0, r * s0 * s1], [r * s0 * s1, s1 * s1]]
        )
        self._gamma_chol = np.linalg.cholesky(self.gamma_prior_cov)

        m, K, L = fd.m, self.K, self.L
        self._T = np.empty((m, K, L))
        self._E = np.empty((m, K, L))

    # ---- censored terminal-time augmentation ----
    def impute_terminal(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        cens = np.flatnonzero(fd.censored)
        if not cens.size:
            return
        k = st.G[cens]
        mu = np.einsum("nd,nd->n", fd.X_u[cens], st.beta_u[k]) + st.gamma[k, fd.z[cens]]
        st.u_value[cens] = sample_truncated_normal(
            mu, np.sqrt(st.tau2[k]), fd.u_lower[cens], np.inf, rng
        )

    # ---- open-gap augmentation ----
    def impute_open_gap(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        rows = fd.open_row
        k = st.G
        l = st.H[rows]
        mu = np.einsum("nd,nd->n", fd.X_y[rows], st.beta_y[k, l]) \
            + st.psi[k, l] * st.gamma[k, fd.z]
        st.y_value[rows] = sample_truncated_normal(
            mu, np.sqrt(st.sigma2[k, l]), fd.open_lower, np.inf, rng
        )

    # ---- cluster and subcluster labels ----
    def update_labels(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        K, L, m = self.K, self.L, fd.m
        gen = rng.generator

        T = self._T
        np.matmul(fd.X_y, st.beta_y.reshape(K * L, fd.d_y).T, out=T.reshape(m, K * L))
        grow = st.gamma[:, fd.z_row].T                     # (m, K)
        T += grow[:, :, None] * st.psi[None, :, :]
        np.subtract(st.y_value[:, None, None], T, out=T)
        np.square(T, out=T)
        T *= -0.5 / st.sigma2[None, :, :]
        with np.errstate(divide="ignore"):
            cfold = np.log(st.w_theta) - 0.5 * (_LOG_2PI + np.log(st.sigma2))
        T += cfold[None, :, :]

        # marginalize the nested layer: logsumexp over l
        mx = T.max(axis=2)                                  # (m, K)
        E = self._E
        np.subtract(T, mx[:, :, None], out=E)
        np.exp(E, out=E)
        with np.errstate(divide="ignore"):
            LG = np.log(E.sum(axis=2))
        LG += mx

        logit = np.add.reduceat(LG, fd.row_start, axis=0)   # (n, K)
        mu_u = fd.X_u @ st.beta_u.T
        mu_u += st.gamma[:, fd.z].T
        zsc = st.u_value[:, None] - mu_u
        logit += -0.5 * (_LOG_2PI + np.log(st.tau2))[None, :] \
            - 0.5 * zsc * zsc / st.tau2[None, :]
        with np.errstate(divide="ignore"):
            logit += np.log(st.w_phi)[None, :]
        st.G = _categorical_rows(logit, gen)

        kg = st.G[fd.subject_of_row]
        st.H = _categorical_rows(T[np.arange(m), kg], gen)

    # ---- stick-breaking weights ----
    def update_weights(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        K, L = self.K, self.L
        gen = rng.generator
        nk = np.bincount(st.G, minlength=K)
        n_gt = nk[::-1].cumsum()[::-1] - nk
        if K > 1:
            st.v_phi[:-1] = gen.beta(1.0 + nk[:-1], st.alpha_phi + n_gt[:-1])
        st.v_phi[K - 1] = 1.0
        st.w_phi = stick_breaking_weights(st.v_phi)

        cell = st.G[fd.subject_of_row] * L + st.H
        ckl = np.bincount(cell, minlength=K * L).reshape(K, L)
        c_gt = ckl[:, ::-1].cumsum(axis=1)[:, ::-1] - ckl
        if L > 1:
            st.v_theta[:, :-1] = gen.beta(
                1.0 + ckl[:, :-1], st.alpha_theta[:, None] + c_gt[:, :-1]
            )
        st.v_theta[:, L - 1] = 1.0
        st.w_theta = stick_breaking_weights(st.v_theta, axis=1)

    # ---- concentration parameters ----
    def update_concentrations(self, st: ChainState, rng: RngStream) -> None:
        hp = self.hp
        K, L = self.K, self.L
        if K > 1:
            s_phi = np.log1p(-np.minimum(st.v_phi[:-1], 1.0 - 1e-15)).sum()
        else:
            s_phi = 0.0
        st.alpha_phi = float(sample_gamma(hp.a_alpha + K - 1, hp.b_alpha - s_phi, rng))
        if L > 1:
            s_th = np.log1p(-np.minimum(st.v_theta[:, :-1], 1.0 - 1e-15)).sum(axis=1)
        else:
            s_th = np.zeros(K)
        st.alpha_theta = np.atleast_1d(
            sample_gamma(hp.a_alpha + L - 1, hp.b_alpha - s_th, rng, size=K)
        )

    # ---- survival atoms ----
    def update_survival_atoms(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        hp = self.hp
        K = self.K
        gen = rng.generator
        gam = st.gamma[st.G, fd.z]
        resid = st.u_value - np.einsum("nd,nd->n", fd.X_u, st.beta_u[st.G]) - gam
        nk = np.bincount(st.G, minlength=K).astype(float)
        ss = np.bincount(st.G, weights=resid * resid, minlength=K)
        st.tau2 = np.atleast_1d(sample_inverse_gamma(
            hp.a_tau + 0.5 * nk, hp.b_tau + 0.5 * ss, rng
        ))
        ustar = st.u_value - gam
        XtX, Xty = _grouped_gram(fd.X_u, ustar, st.G, K)
        mean, cholT = _conjugate_coef_posterior(
            XtX, Xty, st.tau2, self.Sinv_bu, self.Sinv_mu_bu
        )
        st.beta_u = _draw_coef(mean, cholT, np.sqrt(st.tau2), gen)

    # ---- recurrent-gap atoms ----
    def update_recurrent_atoms(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        hp = self.hp
        K, L = self.K, self.L
        gen = rng.generator
        kg = st.G[fd.subject_of_row]
        cell = kg * L + st.H
        xb = np.einsum("md,md->m", fd.X_y, st.beta_y.reshape(K * L, fd.d_y)[cell])
        off = st.psi.reshape(-1)[cell] * st.gamma[kg, fd.z_row]
        resid = st.y_value - xb - off
        ncell = np.bincount(cell, minlength=K * L).astype(float)
        ss = np.bincount(cell, weights=resid * resid, minlength=K * L)
        sig2 = np.atleast_1d(sample_inverse_gamma(
            hp.a_sigma + 0.5 * ncell, hp.b_sigma + 0.5 * ss, rng
        ))
        st.sigma2 = sig2.reshape(K, L)
        ystar = st.y_value - off
        XtX, Xty = _grouped_gram(fd.X_y, ystar, cell, K * L)
        mean, cholT = _conjugate_coef_posterior(
            XtX, Xty, sig2, self.Sinv_by, self.Sinv_mu_by
        )
        st.beta_y = _draw_coef(mean, cholT, np.sqrt(sig2), gen).reshape(K, L, fd.d_y)

    # ---- frailty pairs ----
    def update_frailties(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        hp = self.hp
        K, L = self.K, self.L
        gen = rng.generator
        sg = np.asarray(hp.sigma_gamma, dtype=float)
        mg = np.asarray(hp.mu_gamma, dtype=float)
        rho = hp.rho
        one_m_r2 = 1.0 - rho * rho

        resid_u = st.u_value - np.einsum("nd,nd->n", fd.X_u, st.beta_u[st.G])
        kg = st.G[fd.subject_of_row]
        cell = kg * L + st.H
        resid_y = st.y_value - np.einsum(
            "md,md->m", fd.X_y, st.beta_y.reshape(K * L, fd.d_y)[cell]
        )
        psi_cell = st.psi.reshape(-1)[cell]
        sig2_cell = st.sigma2.reshape(-1)[cell]

        for zv in (0, 1):
            sub = fd.z == zv
            rows = fd.z_row == zv
            other = 1 - zv
            nkz = np.bincount(st.G[sub], minlength=K).astype(float)
            su = np.bincount(st.G[sub], weights=resid_u[sub], minlength=K)
            prec_y = np.bincount(
                kg[rows], weights=psi_cell[rows] ** 2 / sig2_cell[rows], minlength=K
            )
            sy = np.bincount(
                kg[rows],
                weights=psi_cell[rows] * resid_y[rows] / sig2_cell[rows],
                minlength=K,
            )
            prior_prec = 1.0 / (one_m_r2 * sg[zv] ** 2)
            cross = rho * (st.gamma[:, other] - mg[other]) / (one_m_r2 * sg[zv] * sg[other])
            prec = prior_prec + nkz / st.tau2 + prec_y
            mean = (mg[zv] * prior_prec + cross + su / st.tau2 + sy) / prec
            st.gamma[:, zv] = mean + np.sqrt(1.0 / prec) * gen.standard_normal(K)

    # ---- frailty modulation ----
    def update_modulation(self, st: ChainState, rng: RngStream) -> None:
        fd = self.fd
        hp = self.hp
        K, L = self.K, self.L
        gen = rng.generator
        kg = st.G[fd.subject_of_row]
        cell = kg * L + st.H
        resid = st.y_value - np.einsum(
            "md,md->m", fd.X_y, st.beta_y.reshape(K * L, fd.d_y)[cell]
        )
        gam = st.gamma[kg, fd.z_row]
        sig2_cell = st.sigma2.reshape(-1)[cell]
        prec = 1.0 / hp.sigma_psi ** 2 + np.bincount(
            cell, weights=gam * gam / sig2_cell, minlength=K * L
        )
        num = hp.mu_psi / hp.sigma_psi ** 2 + np.bincount(
            cell, weights=gam * resid / sig2_cell, minlength=K * L
        )
        st.psi = ((num / prec) + np.sqrt(1.0 / prec) * gen.standard_normal(K * L)).reshape(K, L)

    # ---- initialization ----
    def init_chain(self, rng: RngStream) -> ChainState:
        """Initial state drawn from the priors; imputations respect bounds."""
        fd = self.fd
        hp = self.hp
        K, L = self.K, self.L
        gen = rng.generator

        alpha_phi = float(sample_gamma(hp.a_alpha, hp.b_alpha, rng))
        alpha_theta = np.atleast_1d(sample_gamma(hp.a_alpha, hp.b_alpha, rng, size=K))
        v_phi = np.ones(K)
        if K > 1:
            v_phi[:-1] = gen.beta(1.0, alpha_phi, size=K - 1)
        w_phi = stick_breaking_weights(v_phi)
        v_theta = np.ones((K, L))
        if L > 1:
            v_theta[:, :-1] = gen.beta(
                1.0, np.broadcast_to(alpha_theta[:, None], (K, L - 1))
            )
        w_theta = stick_breaking_weights(v_theta, axis=1)

        beta_u = self.mu_bu + gen.standard_normal((K, fd.d_u)) @ np.linalg.cholesky(self.Sig_bu).T
        tau2 = np.atleast_1d(sample_inverse_gamma(hp.a_tau, hp.b_tau, rng, size=K))
        beta_y = self.mu_by + gen.standard_normal((K, L, fd.d_y)) @ np.linalg.cholesky(self.Sig_by).T
        sigma2 = np.atleast_2d(sample_inverse_gamma(hp.a_sigma, hp.b_sigma, rng, size=(K, L)))
        psi = hp.mu_psi + hp.sigma_psi * gen.standard_normal((K, L))
        gamma = np.asarray(hp.mu_gamma) + gen.standard_normal((K, 2)) @ self._gamma_chol.T

        cs = np.cumsum(w_phi)
        G = np.minimum(np.searchsorted(cs, gen.random(fd.n) * cs[-1], side="right"), K - 1)
        kg = G[fd.subject_of_row]
        cs_t = np.cumsum(w_theta[kg], axis=1)
        u = gen.random(fd.m) * cs_t[:, -1]
        H = np.minimum((cs_t < u[:, None]).sum(axis=1), L - 1)

        st = ChainState(
            iteration=0,
            G=G.astype(np.int64), H=H.astype(np.int64),
            v_phi=v_phi, w_phi=w_phi, v_theta=v_theta, w_theta=w_theta,
            alpha_phi=alpha_phi, alpha_theta=alpha_theta,
            beta_u=beta_u, tau2=tau2, beta_y=beta_y, sigma2=sigma2,
            gamma=gamma, psi=psi,
            u_value=fd.u_obs.copy(), y_value=fd.y_obs.copy(),
        )
        self.impute_terminal(st, rng)
        self.impute_open_gap(st, rng)
        return st

    def sweep(self, st: ChainState, rng: RngStream) -> None:
        self.impute_terminal(st, rng)
        self.impute_open_gap(st, rng)
        self.update_labels(st, rng)
        self.update_weights(st, rng)
        self.update_concentrations(st, rng)
        self.update_survival_atoms(st, rng)
        self.update_recurrent_atoms(st, rng)
        self.update_frailties(st, rng)
        self.update_modulation(st, rng)

    def occupancy(self, st: ChainState) -> dict:
        fd = self.fd
        K, L = self.K, self.L
        occ_phi = int((np.bincount(st.G, minlength=K) > 0).sum())
        cell = st.G[fd.subject_of_row] * L + st.H
        cell_counts = np.bincount(cell, minlength=K * L).reshape(K, L)
        occ_cells = int((cell_counts > 0).sum())
        # index alarm: the last stick of a layer is in use (a single-component
        # layer cannot meaningfully hit its cap)
        hit_phi = K > 1 and int(st.G.max()) == K - 1
        hit_theta = L > 1 and int(st.H.max()) == L - 1
        # saturation: a layer has no unoccupied component left to grow into
        sat_phi = K > 1 and occ_phi == K
        sat_theta = L > 1 and int((cell_counts > 0).sum(axis=1).max()) == L
        return {
            "occ_phi": occ_phi,
            "occ_cells": occ_cells,
            "hit_phi": hit_phi,
            "hit_theta": hit_theta,
            "sat_phi": sat_phi,
            "sat_theta": sat_theta,
        }


def run_chain(
    data: Dataset,
    hyper: Hyperparameters,
    variant: ModelVariant,
    seed: int,
    draw_sink=None,
) -> TraceDiagnostics:
    """Run the sampler; emit thinned post-burn-in draws to ``draw_sink``."""
    engine = GibbsEngine(data, hyper, variant)
    rng = RngStream(seed)
    st = engine.init_chain(rng)

    n_iter, n_burnin, thin = hyper.n_iter, hyper.n_burnin, hyper.thin
    occupied_phi = np.zeros(n_iter, dtype=np.int32)
    occupied_cells = np.zeros(n_iter, dtype=np.int32)
    cap_phi = 0
    cap_theta = 0
    sat_phi = 0
    sat_theta = 0
    n_post = 0
    n_draws = 0
    t0 = time.perf_counter()
    for it in range(1, n_iter + 1):
        engine.sweep(st, rng)
        st.iteration = it
        occ = engine.occupancy(st)
        occupied_phi[it - 1] = occ["occ_phi"]
        occupied_cells[it - 1] = occ["occ_cells"]
        if it > n_burnin:
            n_post += 1
            cap_phi += occ["hit_phi"]
            cap_theta += occ["hit_theta"]
            sat_phi += occ["sat_phi"]
            sat_theta += occ["sat_theta"]
            if (it - n_burnin) % thin == 0 and draw_sink is not None:
                draw_sink(st.snapshot())
                n_draws += 1
    elapsed = time.perf_counter() - t0

    return TraceDiagnostics(
        variant=ModelVariant(variant).value,
        K=engine.K,
        L=engine.L,
        n_iter=n_iter,
        n_burnin=n_burnin,
        thin=thin,
        seed=seed,
        n_draws=n_draws,
        occupied_phi=occupied_phi,
        occupied_cells=occupied_cells,
        frac_at_cap_phi=cap_phi / max(n_post, 1),
        frac_at_cap_theta=cap_theta / max(n_post, 1),
        frac_saturated_phi=sat_phi / max(n_post, 1),
        frac_saturated_theta=sat_theta / max(n_post, 1),
        elapsed_seconds=elapsed,
    )


def fit_with_escalation(
    data: Dataset,
    hyper: Hyperparameters,
    variant: ModelVariant,
    seed: int,
    max_rounds: int = 3,
):
    """Run the chain, re-running with K, L scaled by 1.5 while the
    truncation is saturated (up to ``max_rounds`` attempts).

    Escalation keys off *saturation* — a layer whose occupied components fill
    the whole truncation, leaving no room to grow — not off the softer
    last-index alarm: occupied clusters scatter over stick indices as the
    chain evolves (labels are exchangeable and nothing compacts them), so an
    outlier grabbing the final stick is routine even when most of the
    truncation is idle. ``TraceDiagnostics.truncation_alarm`` still reports
    the index-based warning.

    Returns (draws, diagnostics, hyperparameters_used).
    """
    hp = hyper
    for _ in range(max_rounds):
        sink = ListSink()
        diag = run_chain(data, hp, variant, seed, sink)
        if not diag.saturated:
            return sink.draws, diag, hp
        hp = hp.escalated()
    sink = ListSink()
    diag = run_chain(data, hp, variant, seed, sink)
    return sink.draws, diag, hp
