"""Bayesian exposure-response models for the three trial endpoints.

All three estimators share the sklearn fit/predict surface: hyperparameters
(priors, reference exposure, sampler budget) are constructor arguments, and
``fit`` stores posterior draws on the constrained scale. Safety is a
two-parameter logistic regression on log relative exposure, the
pharmacodynamic endpoint a log-linear Gaussian model, and efficacy a
monotone I-spline regression with nonnegative coefficients.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, roots_hermitenorm
from scipy.stats import norm
from scipy.optimize import brentq
from sklearn.base import BaseEstimator

from .errors import CalibrationError, EstimationError, InvalidParameterError
from .sampler import LogDensityTarget, SamplerConfig, diagnostics, sample_posterior
from .splines import ISplineBasis, knots_from_exposures

DEFAULT_Z_REF = 40.0
DEFAULT_ENGAGEMENT_THRESHOLD = 0.5
RHAT_LIMIT = 1.1


@dataclass(frozen=True)
class PatientOutcome:
    """Endpoint observations for one patient, keyed to an exposure value.

    ``pdy_r`` and ``efficacy_s`` are stored as relative reductions from
    baseline (positive = reduction), so all endpoints improve with exposure.
    """

    patient_id: str
    exposure_z: float
    dlt_w: int | None = None
    pdy_r: float | None = None
    efficacy_s: float | None = None

    def __post_init__(self):
        if not (np.isfinite(self.exposure_z) and self.exposure_z > 0):
            raise InvalidParameterError("exposure must be finite and positive")
        if self.dlt_w is not None and self.dlt_w not in (0, 1):
            raise InvalidParameterError("dlt_w must be 0 or 1")


def _validate_exposures(z) -> np.ndarray:
    z = np.asarray(z, dtype=float).ravel()
    if z.size == 0:
        raise InvalidParameterError("no observations supplied")
    if np.any(~np.isfinite(z)) or np.any(z <= 0):
        raise InvalidParameterError("exposures must be finite and positive")
    return z


def _sampler_config(self, seed):
    return SamplerConfig(n_chains=self.n_chains, n_warmup=self.n_warmup,
                         n_draws=self.n_draws, seed=self.seed if seed is None else seed)


def _check_mixing(draws: np.ndarray, n_chains: int, strict: bool, label: str) -> float:
    """Max split R-hat over constrained coordinates; raise or warn per mode."""
    from .sampler import split_rhat

    chains = draws.reshape(n_chains, -1, draws.shape[-1])
    with np.errstate(invalid="ignore"):
        rhat = split_rhat(chains)
    worst = float(np.nanmax(rhat)) if np.any(np.isfinite(rhat)) else 1.0
    if worst >= RHAT_LIMIT:
        message = f"{label} fit mixing poor: max split R-hat {worst:.3f}"
        if strict:
            raise EstimationError(message)
        warnings.warn(message, RuntimeWarning, stacklevel=3)
    return worst


class SafetyModel(BaseEstimator):
    """Logistic exposure-toxicity model with a bivariate normal prior.

    logit P(DLT | z) = phi1 + exp(phi2) * log(z / z_ref)
    """

    def __init__(self, z_ref: float = DEFAULT_Z_REF,
                 prior_mean=(-1.0, 0.0), prior_cov=((4.0, 0.0), (0.0, 1.0)),
                 n_chains: int = 4, n_warmup: int = 1000, n_draws: int = 1000,
                 seed: int = 0, strict_diagnostics: bool = True):
        self.z_ref = z_ref
        self.prior_mean = prior_mean
        self.prior_cov = prior_cov
        self.n_chains = n_chains
        self.n_warmup = n_warmup
        self.n_draws = n_draws
        self.seed = seed
        self.strict_diagnostics = strict_diagnostics

    def fit(self, z, w, seed: int | None = None):
        z = _validate_exposures(z)
        w = np.asarray(w, dtype=float).ravel()
        if w.shape != z.shape or not np.all(np.isin(w, (0.0, 1.0))):
            raise InvalidParameterError("toxicity outcomes must be 0/1, one per exposure")
        if self.z_ref <= 0:
            raise InvalidParameterError("z_ref must be positive")
        mu = np.asarray(self.prior_mean, dtype=float)
        cov = np.asarray(self.prior_cov, dtype=float)
        prec = np.linalg.inv(cov)
        x = np.log(z / self.z_ref)

        def logp(theta):
            phi1, phi2 = theta[:, 0], theta[:, 1]
            slope = np.exp(np.minimum(phi2, 50.0))
            eta = phi1[:, None] + slope[:, None] * x[None, :]
            loglik = np.sum(w[None, :] * eta - np.logaddexp(0.0, eta), axis=1)
            delta = theta - mu[None, :]
            return loglik - 0.5 * np.einsum("ni,ij,nj->n", delta, prec, delta)

        target = LogDensityTarget(2, logp, init=mu, init_scale=0.5)
        chain_set = sample_posterior(target, _sampler_config(self, seed))
        self.phi_ = chain_set.flat()
        self.max_rhat_ = _check_mixing(self.phi_, self.n_chains,
                                       self.strict_diagnostics, "safety")
        self.chain_set_ = chain_set
        return self

    def predict_draws(self, z) -> np.ndarray:
        """P(DLT | z) per posterior draw; shape (M,) or (M, len(z))."""
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise InvalidParameterError("prediction exposures must be positive")
        x = np.log(z / self.z_ref)
        phi1 = self.phi_[:, 0]
        slope = np.exp(self.phi_[:, 1])
        if x.ndim == 0:
            return expit(phi1 + slope * float(x))
        return expit(phi1[:, None] + slope[:, None] * x[None, :])

    def predict(self, z) -> np.ndarray:
        return np.mean(self.predict_draws(z), axis=0)


class PdyModel(BaseEstimator):
    """Log-linear exposure model for the pharmacodynamic reduction endpoint.

    R | z ~ Normal(beta1 + beta2 * log(z / z_ref), sigma_r^2)
    """

    def __init__(self, z_ref: float = DEFAULT_Z_REF,
                 prior_mean=(0.0, 0.0), prior_cov=((4.0, 0.0), (0.0, 4.0)),
                 precision_prior=(0.01, 0.01),
                 threshold_c: float = DEFAULT_ENGAGEMENT_THRESHOLD,
                 n_chains: int = 4, n_warmup: int = 1000, n_draws: int = 1000,
                 seed: int = 0, strict_diagnostics: bool = True):
        self.z_ref = z_ref
        self.prior_mean = prior_mean
        self.prior_cov = prior_cov
        self.precision_prior = precision_prior
        self.threshold_c = threshold_c
        self.n_chains = n_chains
        self.n_warmup = n_warmup
        self.n_draws = n_draws
        self.seed = seed
        self.strict_diagnostics = strict_diagnostics

    def fit(self, z, r, seed: int | None = None):
        z = _validate_exposures(z)
        r = np.asarray(r, dtype=float).ravel()
        if r.shape != z.shape or np.any(~np.isfinite(r)):
            raise InvalidParameterError("need one finite outcome per exposure")
        a0, b0 = self.precision_prior
        if min(a0, b0) <= 0:
            raise InvalidParameterError("precision prior parameters must be positive")
        mu = np.asarray(self.prior_mean, dtype=float)
        prec = np.linalg.inv(np.asarray(self.prior_cov, dtype=float))
        x = np.log(z / self.z_ref)
        n = len(z)

        def logp(theta):
            beta = theta[:, :2]
            u = theta[:, 2]
            mean = beta[:, 0:1] + beta[:, 1:2] * x[None, :]
            rss = np.sum((r[None, :] - mean) ** 2, axis=1)
            loglik = -n * u - 0.5 * rss * np.exp(-2.0 * np.clip(u, -300.0, 50.0))
            delta = beta - mu[None, :]
            logprior = (-0.5 * np.einsum("ni,ij,nj->n", delta, prec, delta)
                        - 2.0 * a0 * u - b0 * np.exp(-2.0 * np.clip(u, -300.0, 50.0)))
            return loglik + logprior

        init = np.array([float(np.mean(r)), 0.0, math.log(max(np.std(r), 1e-3))])
        target = LogDensityTarget(3, logp, init=init, init_scale=0.3)
        chain_set = sample_posterior(target, _sampler_config(self, seed))
        flat = chain_set.flat()
        self.beta_ = flat[:, :2]
        self.sigma_ = np.exp(flat[:, 2])
        constrained = np.column_stack([self.beta_, self.sigma_])
        self.max_rhat_ = _check_mixing(constrained, self.n_chains,
                                       self.strict_diagnostics, "pdy")
        self.chain_set_ = chain_set
        return self

    def predict_draws(self, z) -> np.ndarray:
        """Mean reduction R | z per posterior draw."""
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise InvalidParameterError("prediction exposures must be positive")
        x = np.log(z / self.z_ref)
        if x.ndim == 0:
            return self.beta_[:, 0] + self.beta_[:, 1] * float(x)
        return self.beta_[:, 0:1] + self.beta_[:, 1:2] * x[None, :]

    def engagement_prob_draws(self, z, c: float | None = None) -> np.ndarray:
        """P(R >= c | z) per posterior draw, using that draw's residual sd."""
        c = self.threshold_c if c is None else c
        mean = self.predict_draws(z)
        sigma = self.sigma_ if mean.ndim == 1 else self.sigma_[:, None]
        return norm.sf((c - mean) / sigma)

    def predict(self, z) -> np.ndarray:
        return np.mean(self.predict_draws(z), axis=0)


class EfficacyModel(BaseEstimator):
    """Monotone spline exposure-efficacy model.

    S | z ~ Normal(gamma0 + sum_l gamma_l I_l(z), sigma_s^2) with gamma_l >= 0
    so the fitted curve never decreases with exposure. Knots default to the
    percentile rule on the training exposures; predictions outside the knot
    range use flat extrapolation.
    """

    def __init__(self, z_ref: float = DEFAULT_Z_REF, knots=None,
                 intercept_prior=(0.0, 2.0), coef_prior=(0.001, 0.001),
                 precision_prior=(0.01, 0.01),
                 n_chains: int = 4, n_warmup: int = 1000, n_draws: int = 1000,
                 seed: int = 0, strict_diagnostics: bool = True):
        self.z_ref = z_ref
        self.knots = knots
        self.intercept_prior = intercept_prior
        self.coef_prior = coef_prior
        self.precision_prior = precision_prior
        self.n_chains = n_chains
        self.n_warmup = n_warmup
        self.n_draws = n_draws
        self.seed = seed
        self.strict_diagnostics = strict_diagnostics

    def fit(self, z, s, seed: int | None = None):
        z = _validate_exposures(z)
        s = np.asarray(s, dtype=float).ravel()
        if s.shape != z.shape or np.any(~np.isfinite(s)):
            raise InvalidParameterError("need one finite outcome per exposure")
        mesh = (knots_from_exposures(z) if self.knots is None
                else np.asarray(self.knots, dtype=float))
        self.basis_ = ISplineBasis(mesh)
        self.knots_ = self.basis_.mesh
        L = self.basis_.df
        B = self.basis_.design(z)                     # (n, L)
        m0, sd0 = self.intercept_prior
        ca, cb = self.coef_prior
        a0, b0 = self.precision_prior
        if min(sd0, ca, cb, a0, b0) <= 0:
            raise InvalidParameterError("prior scale parameters must be positive")
        n = len(z)

        def logp(theta):
            g0 = theta[:, 0]
            v = np.clip(theta[:, 1:1 + L], -300.0, 50.0)
            u = np.clip(theta[:, 1 + L], -300.0, 50.0)
            gamma = np.exp(v)
            mean = g0[:, None] + gamma @ B.T
            rss = np.sum((s[None, :] - mean) ** 2, axis=1)
            loglik = -n * u - 0.5 * rss * np.exp(-2.0 * u)
            logprior = (-0.5 * (g0 - m0) ** 2 / sd0**2
                        + np.sum(ca * v - cb * gamma, axis=1)
                        - 2.0 * a0 * u - b0 * np.exp(-2.0 * u))
            return loglik + logprior

        init = np.concatenate([[float(np.median(s))], np.full(L, -3.0),
                               [math.log(max(np.std(s), 1e-3))]])
        target = LogDensityTarget(L + 2, logp, init=init, init_scale=0.4)
        chain_set = sample_posterior(target, _sampler_config(self, seed))
        flat = chain_set.flat()
        self.gamma0_ = flat[:, 0]
        self.gamma_ = np.exp(np.clip(flat[:, 1:1 + L], -300.0, 50.0))
        self.sigma_ = np.exp(flat[:, 1 + L])
        constrained = np.column_stack([self.gamma0_,
                                       self.gamma0_[:, None] + np.cumsum(self.gamma_, axis=1),
                                       self.sigma_])
        self.max_rhat_ = _check_mixing(constrained, self.n_chains,
                                       self.strict_diagnostics, "efficacy")
        self.chain_set_ = chain_set
        return self

    def predict_draws(self, z) -> np.ndarray:
        """Mean efficacy S | z per posterior draw (flat outside the knots)."""
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0):
            raise InvalidParameterError("prediction exposures must be positive")
        B = self.basis_.design(z)
        if z.ndim == 0:
            return self.gamma0_ + self.gamma_ @ B
        return self.gamma0_[:, None] + self.gamma_ @ B.T

    def predict(self, z) -> np.ndarray:
        return np.mean(self.predict_draws(z), axis=0)


# ---------------------------------------------------------------------------
# Weakly informative prior calibration for the two-parameter logistic model
# ---------------------------------------------------------------------------


def _quantile_probs(mu1, sigma1, sigma2, x, threshold, nodes, weights):
    """Pr(phi1 + exp(phi2) * x < threshold) under phi1 ~ N(mu1, sigma1^2),
    phi2 ~ N(0, sigma2^2), by Gauss-Hermite quadrature over phi2."""
    slope = np.exp(sigma2 * nodes)
    args = (threshold - slope * x - mu1) / sigma1
    return float(np.sum(weights * norm.cdf(args)))


def calibrate_logistic_prior(anchor_low: float, anchor_high: float, ref: float,
                             delta_min: float, delta_max: float,
                             underdose_prob_low: float = 0.90,
                             acceptable_prob_high: float = 0.20):
    """Bivariate normal prior matching two prior-predictive quantiles.

    The slope prior is exp(phi2) with median 1 (mu2 = 0); (mu1, sigma1) are
    solved by nested root finding so that Pr(p(anchor_low) < delta_min)
    equals ``underdose_prob_low`` and Pr(p(anchor_high) < delta_max) equals
    ``acceptable_prob_high``. sigma2 starts at 1 and is lowered through a
    fixed grid until the second constraint becomes reachable (for some
    anchor/target combinations no sigma1 works at sigma2 = 1).
    Returns (mean 2-vector, 2x2 covariance).
    """
    if min(anchor_low, anchor_high, ref) <= 0:
        raise InvalidParameterError("anchors and reference must be positive")
    x_low = math.log(anchor_low / ref)
    x_high = math.log(anchor_high / ref)
    if abs(x_high - x_low) < 1e-9:
        raise CalibrationError("anchors coincide: the covariate carries no information")
    if not 0 < delta_min < delta_max < 1:
        raise InvalidParameterError("need 0 < delta_min < delta_max < 1")
    t_low = math.log(delta_min / (1 - delta_min))
    t_high = math.log(delta_max / (1 - delta_max))
    nodes, weights = roots_hermitenorm(60)
    weights = weights / math.sqrt(2 * math.pi)

    def solve_at(sigma2):
        def mu_for(sigma1):
            def g(mu1):
                return (_quantile_probs(mu1, sigma1, sigma2, x_low, t_low,
                                        nodes, weights) - underdose_prob_low)
            return brentq(g, -80.0, 80.0, xtol=1e-10)

        def high_gap(sigma1):
            return (_quantile_probs(mu_for(sigma1), sigma1, sigma2, x_high,
                                    t_high, nodes, weights) - acceptable_prob_high)

        grid = np.geomspace(5e-3, 40.0, 50)
        values = [high_gap(s) for s in grid]
        for (s0, v0), (s1, v1) in zip(zip(grid, values), zip(grid[1:], values[1:])):
            if v0 == 0 or v0 * v1 < 0:
                sigma1 = brentq(high_gap, s0, s1, xtol=1e-10)
                return mu_for(sigma1), sigma1
        return None

    for sigma2 in (1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1):
        solved = solve_at(sigma2)
        if solved is not None:
            mu1, sigma1 = solved
            return (np.array([mu1, 0.0]),
                    np.array([[sigma1**2, 0.0], [0.0, sigma2**2]]))
    raise CalibrationError("no prior scale satisfies both quantile constraints")


def prior_predictive_probs(prior_mean, prior_cov, anchor: float, ref: float,
                           threshold: float, n_draws: int, seed) -> float:
    """Monte Carlo Pr(p(anchor) < threshold) under the given logistic prior."""
    rng = np.random.default_rng(seed)
    draws = rng.multivariate_normal(np.asarray(prior_mean, dtype=float),
                                    np.asarray(prior_cov, dtype=float), size=n_draws)
    p = expit(draws[:, 0] + np.exp(draws[:, 1]) * math.log(anchor / ref))
    return float(np.mean(p < threshold))
