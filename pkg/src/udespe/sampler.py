"""Adaptive random-walk Metropolis engine shared by every Bayesian fit.

Targets expose a vectorized unconstrained-space log density; chains are
stepped in lockstep (one numpy batch per iteration) with a pooled proposal
covariance and a Robbins-Monro step-size adaptation during warmup only.
Constrained parameters are expected to be transformed (with their Jacobian
folded into the target) before they reach this module.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidParameterError, SamplerError


@dataclass
class LogDensityTarget:
    """Unconstrained-space posterior target.

    ``log_density`` maps an (n, dimension) array to an (n,) array of log
    densities. ``constrain`` optionally maps unconstrained draws back to the
    model's constrained parameterization (used by model code, not here).
    """

    dimension: int
    log_density: Callable[[np.ndarray], np.ndarray]
    constrain: Callable[[np.ndarray], np.ndarray] | None = None
    init: np.ndarray | None = None
    init_scale: float = 0.5

    def __post_init__(self):
        if self.dimension < 1:
            raise InvalidParameterError("target dimension must be >= 1")


@dataclass
class SamplerConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 1000
    seed: int = 0
    target_accept: float = 0.30

    def __post_init__(self):
        if min(self.n_chains, self.n_warmup, self.n_draws) < 1:
            raise InvalidParameterError("sampler counts must all be >= 1")


@dataclass
class ChainSet:
    """Post-warmup draws, one matrix per chain (n_draws, dimension)."""

    chains: np.ndarray  # (n_chains, n_draws, dimension)
    warmup_dropped: int
    seed: int
    accept_rate: float

    @property
    def n_chains(self) -> int:
        return self.chains.shape[0]

    @property
    def n_draws(self) -> int:
        return self.chains.shape[1]

    @property
    def dimension(self) -> int:
        return self.chains.shape[2]

    def flat(self) -> np.ndarray:
        """All draws pooled, shape (n_chains * n_draws, dimension)."""
        return self.chains.reshape(-1, self.chains.shape[2])


def _eval_target(target, x):
    lp = np.asarray(target.log_density(x), dtype=float)
    if lp.shape != (x.shape[0],):
        raise SamplerError("log_density must return one value per input row")
    if np.any(np.isposinf(lp)):
        raise SamplerError("target log density is unbounded (+inf encountered)")
    return np.where(np.isnan(lp), -np.inf, lp)


def sample_posterior(target: LogDensityTarget, config: SamplerConfig | None = None) -> ChainSet:
    """Draw from the target with covariance-adaptive random-walk Metropolis.

    Deterministic for a fixed config seed. Raises ``SamplerError`` when the
    chains cannot be initialized at a finite-density point.
    """
    config = config or SamplerConfig()
    d = target.dimension
    C = config.n_chains
    rng = np.random.default_rng(config.seed)

    center = np.zeros(d) if target.init is None else np.asarray(target.init, dtype=float)
    if center.shape != (d,):
        raise InvalidParameterError("target init must have length `dimension`")

    x = center[None, :] + target.init_scale * rng.standard_normal((C, d))
    lp = _eval_target(target, x)
    for _ in range(20):
        bad = ~np.isfinite(lp)
        if not bad.any():
            break
        x[bad] = center[None, :] + 0.1 * target.init_scale * rng.standard_normal((int(bad.sum()), d))
        lp[bad] = _eval_target(target, x[bad])
    else:
        raise SamplerError("could not initialize chains at a finite log density")

    log_scale = np.log(2.38 / np.sqrt(d)) + np.log(max(target.init_scale, 1e-3))
    chol = np.eye(d)
    history = np.empty((config.n_warmup, C, d))
    draws = np.empty((C, config.n_draws, d))
    accepted = 0

    n_total = config.n_warmup + config.n_draws
    for it in range(n_total):
        z = rng.standard_normal((C, d))
        u = rng.uniform(size=C)
        prop = x + np.exp(log_scale) * (z @ chol.T)
        lp_prop = _eval_target(target, prop)
        acc = np.log(u) < lp_prop - lp
        x[acc] = prop[acc]
        lp[acc] = lp_prop[acc]
        rate = float(acc.mean())

        if it < config.n_warmup:
            history[it] = x
            gain = min(1.0, 5.0 / np.sqrt(it + 1.0))
            log_scale += gain * (rate - config.target_accept)
            if it >= 50 and (it % 50 == 0 or it == config.n_warmup - 1):
                recent = history[it // 3:it + 1].reshape(-1, d)
                cov = np.cov(recent, rowvar=False).reshape(d, d)
                cov += 1e-10 * np.eye(d) * max(np.trace(cov) / d, 1e-12)
                try:
                    new_chol = np.linalg.cholesky(cov)
                except np.linalg.LinAlgError:
                    new_chol = None
                if new_chol is not None:
                    # keep the overall proposal magnitude, swap in the shape
                    prev_mag = np.exp(log_scale) * np.sqrt(np.trace(chol @ chol.T) / d)
                    new_mag = np.sqrt(np.trace(cov) / d)
                    chol = new_chol
                    log_scale = np.log(max(prev_mag, 1e-300)) - np.log(max(new_mag, 1e-300))
        else:
            draws[:, it - config.n_warmup, :] = x
            accepted += int(acc.sum())

    return ChainSet(chains=draws, warmup_dropped=config.n_warmup, seed=config.seed,
                    accept_rate=accepted / (C * config.n_draws))


def split_rhat(chains: np.ndarray) -> np.ndarray:
    """Split-chain potential scale reduction factor per dimension.

    Returns NaN for dimensions with zero within-chain variance.
    """
    C, n, d = chains.shape
    half = n // 2
    seqs = np.concatenate([chains[:, :half, :], chains[:, half:2 * half, :]], axis=0)
    means = seqs.mean(axis=1)                    # (2C, d)
    variances = seqs.var(axis=1, ddof=1)         # (2C, d)
    W = variances.mean(axis=0)
    B = half * means.var(axis=0, ddof=1)
    var_plus = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.sqrt(var_plus / W)
    out[W <= 0] = np.nan
    return out


def effective_sample_size(chains: np.ndarray) -> np.ndarray:
    """Effective sample size per dimension (Geyer initial monotone sequence)."""
    C, n, d = chains.shape
    ess = np.empty(d)
    for j in range(d):
        seqs = chains[:, :, j]
        centered = seqs - seqs.mean(axis=1, keepdims=True)
        # autocovariance per chain via FFT
        size = 2 ** int(np.ceil(np.log2(2 * n)))
        fft = np.fft.rfft(centered, n=size, axis=1)
        acov = np.fft.irfft(fft * np.conj(fft), n=size, axis=1)[:, :n].real
        acov /= n
        mean_acov = acov.mean(axis=0)
        W = seqs.var(axis=1, ddof=1).mean()
        B_over_n = seqs.mean(axis=1).var(ddof=1) if C > 1 else 0.0
        var_plus = (n - 1) / n * W + B_over_n
        if var_plus <= 0:
            ess[j] = np.nan
            continue
        rho = 1.0 - (W - mean_acov) / var_plus
        # Geyer: sum consecutive pairs while positive and monotone
        tau = 1.0
        prev_pair = np.inf
        t = 1
        while t + 1 < n:
            pair = rho[t] + rho[t + 1]
            if pair < 0:
                break
            pair = min(pair, prev_pair)
            tau += 2 * pair
            prev_pair = pair
            t += 2
        ess[j] = C * n / tau
    return ess


def diagnostics(chain_set: ChainSet) -> dict:
    """R-hat and effective sample size per dimension.

    With a single chain R-hat is unavailable and reported as NaN.
    """
    chains = chain_set.chains
    if chain_set.n_chains >= 2:
        rhat = split_rhat(chains)
    else:
        rhat = np.full(chain_set.dimension, np.nan)
    return {"rhat": rhat, "ess": effective_sample_size(chains),
            "accept_rate": chain_set.accept_rate}
