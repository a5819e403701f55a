"""Dose-escalation with a two-parameter Bayesian logistic model and
overdose control.

Decisions follow the escalation-with-overdose-control family: a dose stays
admissible while its posterior probability of excessive toxicity is below
the control cap, escalation never skips a level, and the trial stops on
accuracy (the recommendation is stable and well targeted), on exhausting the
sample size, or when every dose is too toxic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import InvalidParameterError
from .models import calibrate_logistic_prior
from .sampler import LogDensityTarget, SamplerConfig, sample_posterior

DEFAULT_DOSES = (10.0, 15.0, 25.0, 35.0, 50.0, 70.0)

# Default escalation prior: weakly informative on the log-odds at the
# reference dose with a unit-lognormal slope. Chosen for reactive overdose
# control (a 3/3-DLT first cohort makes every dose inadmissible) while
# keeping escalation speed; the quantile-matched prior from
# ``calibrate_prior`` is far too rigid for that and remains available as an
# explicit option.
DEFAULT_PRIOR_MEAN = (-1.45, 0.0)
DEFAULT_PRIOR_COV = ((0.5625, 0.0), (0.0, 1.0))


def default_prior():
    return np.array(DEFAULT_PRIOR_MEAN), np.array(DEFAULT_PRIOR_COV)


@dataclass(frozen=True)
class EscalationSpec:
    """Design constants of the escalation stage."""

    doses: tuple[float, ...] = DEFAULT_DOSES
    d_ref: float = 50.0
    delta_min: float = 0.20
    delta_max: float = 0.33
    ewoc: float = 0.25
    cohort_size: int = 3
    max_n: int = 24
    accuracy_threshold: float = 0.60
    accuracy_cohorts: int = 3
    underdose_prob_low: float = 0.90
    acceptable_prob_high: float = 0.20
    selection: str = "interval"  # "interval" or "highest" admissible dose

    def __post_init__(self):
        if len(self.doses) < 1 or any(d <= 0 for d in self.doses):
            raise InvalidParameterError("doses must be positive")
        if any(b <= a for a, b in zip(self.doses, self.doses[1:])):
            raise InvalidParameterError("doses must be strictly increasing")
        for name in ("delta_min", "delta_max", "ewoc", "accuracy_threshold",
                     "underdose_prob_low", "acceptable_prob_high"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise InvalidParameterError(f"{name} must lie in (0, 1)")
        if self.delta_min >= self.delta_max:
            raise InvalidParameterError("need delta_min < delta_max")
        if self.cohort_size < 1 or self.max_n < self.cohort_size:
            raise InvalidParameterError("cohort size and max_n inconsistent")
        if self.selection not in ("interval", "highest"):
            raise InvalidParameterError("selection must be 'interval' or 'highest'")


@dataclass
class EscalationState:
    """Accumulated escalation data and stopping status."""

    n_doses: int
    n_treated: np.ndarray = field(default=None)
    n_dlt: np.ndarray = field(default=None)
    cohorts: list = field(default_factory=list)  # (dose_idx, n, n_dlt)
    stopped: str | None = None
    mtd: int | None = None

    def __post_init__(self):
        if self.n_treated is None:
            self.n_treated = np.zeros(self.n_doses, dtype=int)
        if self.n_dlt is None:
            self.n_dlt = np.zeros(self.n_doses, dtype=int)
        self._validate()

    def _validate(self):
        if np.any(self.n_dlt > self.n_treated) or np.any(self.n_treated < 0):
            raise InvalidParameterError("DLT counts cannot exceed treated counts")

    @property
    def total_n(self) -> int:
        return int(self.n_treated.sum())

    @property
    def highest_tried(self) -> int | None:
        tried = np.flatnonzero(self.n_treated > 0)
        return int(tried[-1]) if tried.size else None

    def record_cohort(self, dose_idx: int, n: int, n_dlt: int):
        if not 0 <= dose_idx < self.n_doses:
            raise InvalidParameterError("dose index out of range")
        if not 0 <= n_dlt <= n:
            raise InvalidParameterError("cohort DLT count out of range")
        self.n_treated[dose_idx] += n
        self.n_dlt[dose_idx] += n_dlt
        self.cohorts.append((dose_idx, n, n_dlt))
        self._validate()


def calibrate_prior(spec: EscalationSpec):
    """Weakly informative dose-scale prior from the two quantile targets."""
    return calibrate_logistic_prior(spec.doses[0], spec.doses[-1], spec.d_ref,
                                    spec.delta_min, spec.delta_max,
                                    spec.underdose_prob_low,
                                    spec.acceptable_prob_high)


def fit_blrm_dose(state: EscalationState, prior, spec: EscalationSpec,
                  sampler_config: SamplerConfig | None = None) -> np.ndarray:
    """Posterior draws of (phi1, phi2) for the dose-scale toxicity model.

    With no observations the posterior equals the prior and is sampled
    directly.
    """
    mu, cov = (np.asarray(prior[0], dtype=float), np.asarray(prior[1], dtype=float))
    config = sampler_config or SamplerConfig()
    if state.total_n == 0:
        rng = np.random.default_rng(config.seed)
        return rng.multivariate_normal(mu, cov, size=config.n_chains * config.n_draws)

    observed = np.flatnonzero(state.n_treated > 0)
    x = np.log(np.asarray(spec.doses)[observed] / spec.d_ref)
    n_obs = state.n_treated[observed].astype(float)
    y_obs = state.n_dlt[observed].astype(float)
    prec = np.linalg.inv(cov)

    def logp(theta):
        phi1, phi2 = theta[:, 0], theta[:, 1]
        slope = np.exp(np.minimum(phi2, 50.0))
        eta = phi1[:, None] + slope[:, None] * x[None, :]
        loglik = np.sum(y_obs * eta - n_obs * np.logaddexp(0.0, eta), axis=1)
        delta = theta - mu[None, :]
        return loglik - 0.5 * np.einsum("ni,ij,nj->n", delta, prec, delta)

    target = LogDensityTarget(2, logp, init=mu, init_scale=0.5)
    return sample_posterior(target, config).flat()


def dose_toxicity_draws(draws: np.ndarray, spec: EscalationSpec) -> np.ndarray:
    """Per-draw DLT probability at every dose, shape (M, n_doses)."""
    x = np.log(np.asarray(spec.doses) / spec.d_ref)
    return expit(draws[:, 0:1] + np.exp(draws[:, 1:2]) * x[None, :])


def admissible_doses(draws: np.ndarray, spec: EscalationSpec) -> np.ndarray:
    """Dose indices whose posterior overdose probability is under the cap.

    The cap is strict: a dose with overdose mass exactly at the cap is
    excluded.
    """
    p = dose_toxicity_draws(draws, spec)
    overdose = np.mean(p > spec.delta_max, axis=0)
    return np.flatnonzero(overdose < spec.ewoc)


@dataclass(frozen=True)
class Decision:
    """Outcome of one escalation review."""

    action: str              # "treat" or "stop"
    dose: int | None         # dose to treat next, when action == "treat"
    reason: str | None = None  # "all_toxic" | "accuracy" | "max_n"
    mtd: int | None = None
    admissible: tuple[int, ...] = ()
    interval_prob: np.ndarray | None = None
    overdose_prob: np.ndarray | None = None


def next_dose(state: EscalationState, draws: np.ndarray, spec: EscalationSpec) -> Decision:
    """Escalation review: pick the next dose or stop the stage.

    The candidate set is the admissible doses no more than one level above
    the highest dose tried; among them the dose maximizing the posterior
    mass of the target toxicity interval is recommended (ties to the higher
    dose). Accuracy stopping is checked on that recommendation before any
    further escalation.
    """
    p = dose_toxicity_draws(draws, spec)
    overdose = np.mean(p > spec.delta_max, axis=0)
    interval = np.mean((p > spec.delta_min) & (p < spec.delta_max), axis=0)
    admissible = np.flatnonzero(overdose < spec.ewoc)

    if admissible.size == 0:
        return Decision(action="stop", dose=None, reason="all_toxic", mtd=None,
                        admissible=(), interval_prob=interval, overdose_prob=overdose)

    if state.total_n == 0:
        start = 0
        if start not in admissible:
            return Decision(action="stop", dose=None, reason="all_toxic", mtd=None,
                            admissible=tuple(admissible), interval_prob=interval,
                            overdose_prob=overdose)
        return Decision(action="treat", dose=start, admissible=tuple(admissible),
                        interval_prob=interval, overdose_prob=overdose)

    ceiling = min(state.highest_tried + 1, len(spec.doses) - 1)
    candidates = admissible[admissible <= ceiling]
    if candidates.size == 0:
        return Decision(action="stop", dose=None, reason="all_toxic", mtd=None,
                        admissible=tuple(admissible), interval_prob=interval,
                        overdose_prob=overdose)
    if spec.selection == "highest":
        best = int(candidates[-1])
    else:
        best = int(candidates[np.flatnonzero(
            interval[candidates] == interval[candidates].max())[-1]])

    recent = [c[0] for c in state.cohorts[-spec.accuracy_cohorts:]]
    if (len(recent) == spec.accuracy_cohorts and all(d == best for d in recent)
            and interval[best] >= spec.accuracy_threshold):
        return Decision(action="stop", dose=None, reason="accuracy", mtd=best,
                        admissible=tuple(admissible), interval_prob=interval,
                        overdose_prob=overdose)

    if state.total_n + spec.cohort_size > spec.max_n:
        return Decision(action="stop", dose=None, reason="max_n", mtd=best,
                        admissible=tuple(admissible), interval_prob=interval,
                        overdose_prob=overdose)

    return Decision(action="treat", dose=best, admissible=tuple(admissible),
                    interval_prob=interval, overdose_prob=overdose)


def escalation_review(state: EscalationState, spec: EscalationSpec, prior=None,
                      sampler_config: SamplerConfig | None = None) -> Decision:
    """Fit the dose-scale model on the current state and review it."""
    prior = default_prior() if prior is None else prior
    draws = fit_blrm_dose(state, prior, spec, sampler_config)
    return next_dose(state, draws, spec)
