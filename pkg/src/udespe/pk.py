"""One-compartment oral PK model: profiles, exposure metrics, simulation,
and population estimation with lognormal inter-individual variability.

The structural model is first-order absorption with linear elimination,
summed over all administrations of a regimen (superposition). Exposure
metrics (AUC24, cumulative AUC, Cmax, Ctrough) derive from the closed-form
profile. Population fitting uses stochastic-approximation EM with a
Metropolis E-step; random effects are lognormal on ka and CL, the residual
error is proportional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize, minimize_scalar

from .errors import EstimationError, InvalidParameterError

# Relative |ka - k| below which the absorption/elimination rates are merged
# into the analytic flip-flop limit (removable singularity of the profile).
_KA_K_MERGE_RTOL = 1e-9

# Concentrations are floored here inside the proportional-error likelihood so
# pre-dose (zero-concentration) samples keep the log-likelihood finite.
_CONC_FLOOR = 1e-12


class ExposureKind(Enum):
    """Individual exposure metric derived from a concentration profile."""

    AUC24 = "auc24"
    AUCCUM = "auccum"
    CMAX = "cmax"
    CTROUGH = "ctrough"


@dataclass(frozen=True)
class DoseRegimen:
    """Ordered schedule of (dose_mg, time_h) administrations."""

    administrations: tuple[tuple[float, float], ...]
    label: str = ""

    def __post_init__(self):
        if len(self.administrations) == 0:
            raise InvalidParameterError("regimen needs at least one administration")
        admins = tuple((float(d), float(t)) for d, t in self.administrations)
        times = [t for _, t in admins]
        if any(d <= 0 for d, _ in admins):
            raise InvalidParameterError("all dose amounts must be positive")
        if any(t < 0 for t in times):
            raise InvalidParameterError("administration times must be nonnegative")
        if any(t1 <= t0 for t0, t1 in zip(times, times[1:])):
            raise InvalidParameterError("administration times must be strictly increasing")
        object.__setattr__(self, "administrations", admins)

    @classmethod
    def once_daily(cls, dose_mg: float, n_days: int = 28, label: str = "") -> "DoseRegimen":
        return cls(tuple((dose_mg, 24.0 * i) for i in range(n_days)),
                   label=label or f"{dose_mg:g}mg-qd-x{n_days}")

    @property
    def doses(self) -> np.ndarray:
        return np.array([d for d, _ in self.administrations])

    @property
    def times(self) -> np.ndarray:
        return np.array([t for _, t in self.administrations])

    @property
    def last_time(self) -> float:
        return self.administrations[-1][1]

    def truncated(self, n_administrations: int) -> "DoseRegimen":
        """Regimen consisting of the first ``n_administrations`` entries."""
        if not 1 <= n_administrations <= len(self.administrations):
            raise InvalidParameterError("truncation index out of range")
        return DoseRegimen(self.administrations[:n_administrations],
                           label=self.label)


@dataclass(frozen=True)
class PopPKParams:
    """Population-level PK parameters with lognormal IIV on ka and CL."""

    ka_pop: float
    cl_pop: float
    v_pop: float
    omega_ka_sq: float = 0.0
    omega_cl_sq: float = 0.0
    prop_error_sd: float = 0.0

    def __post_init__(self):
        for name in ("ka_pop", "cl_pop", "v_pop"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be finite and positive")
        for name in ("omega_ka_sq", "omega_cl_sq", "prop_error_sd"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise InvalidParameterError(f"{name} must be finite and nonnegative")


@dataclass(frozen=True)
class IndividualPK:
    """One subject's PK parameter vector."""

    ka: float
    cl: float
    v: float

    def __post_init__(self):
        for name in ("ka", "cl", "v"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be finite and positive")

    @property
    def k(self) -> float:
        return self.cl / self.v


@dataclass(frozen=True)
class ConcentrationSample:
    """A single observed (or simulated) plasma concentration."""

    patient_id: str
    time_h: float
    concentration: float

    def __post_init__(self):
        if self.time_h < 0:
            raise InvalidParameterError("sample time must be nonnegative")
        if self.concentration < 0:
            raise InvalidParameterError("concentration must be nonnegative")


def _profile(ka, cl, v, doses, admin_times, t):
    """Concentration at times ``t`` for (arrays of) individual parameters.

    ``ka``/``cl``/``v`` broadcast against each other; ``t`` broadcasts along a
    trailing axis. Administrations with time > t contribute zero.
    """
    ka = np.asarray(ka, dtype=float)
    cl = np.asarray(cl, dtype=float)
    v = np.asarray(v, dtype=float)
    t = np.asarray(t, dtype=float)
    k = cl / v
    # shapes: params (...,1,1), admins (L,1), times (T,)
    ka_b = ka[..., None, None]
    k_b = k[..., None, None]
    v_b = v[..., None, None]
    d_b = doses[:, None]
    tl_b = admin_times[:, None]
    s = t[None, :] - tl_b
    active = s >= 0
    s = np.where(active, s, 0.0)
    diff = ka_b - k_b
    degenerate = np.abs(diff) < _KA_K_MERGE_RTOL * np.abs(k_b)
    safe_diff = np.where(degenerate, 1.0, diff)
    regular = (ka_b / safe_diff) * (np.exp(-k_b * s) - np.exp(-ka_b * s))
    limit = k_b * s * np.exp(-k_b * s)
    term = (d_b / v_b) * np.where(degenerate, limit, regular)
    return np.sum(np.where(active, term, 0.0), axis=-2)


def concentration_at(params: IndividualPK, regimen: DoseRegimen, t: float) -> float:
    """Plasma concentration at time ``t`` under superposition of all
    administrations delivered up to ``t``. Zero before the first dose."""
    if not np.isfinite(t) or t < 0:
        raise InvalidParameterError("time must be finite and nonnegative")
    value = _profile(params.ka, params.cl, params.v,
                     regimen.doses, regimen.times, np.array([t]))[0]
    return float(max(value, 0.0))


def _auc_segment(ka, k, s):
    """Integral of the unit-amplitude profile term from 0 to s (s >= 0)."""
    diff = ka - k
    degenerate = np.abs(diff) < _KA_K_MERGE_RTOL * np.abs(k)
    safe_diff = np.where(degenerate, 1.0, diff)
    regular = (ka / safe_diff) * ((1.0 - np.exp(-k * s)) / k
                                  - (1.0 - np.exp(-ka * s)) / ka)
    limit = (1.0 - np.exp(-k * s) * (1.0 + k * s)) / k
    return np.where(degenerate, limit, regular)


def _auc_window(ka, cl, v, doses, admin_times, t0, t1):
    """Closed-form AUC of the superposed profile over [t0, t1].

    Parameter arrays broadcast; returns an array of matching shape.
    """
    ka = np.asarray(ka, dtype=float)
    cl = np.asarray(cl, dtype=float)
    v = np.asarray(v, dtype=float)
    k = cl / v
    ka_b = ka[..., None]
    k_b = k[..., None]
    s1 = np.maximum(t1 - admin_times, 0.0)
    s0 = np.maximum(t0 - admin_times, 0.0)
    contrib = _auc_segment(ka_b, k_b, s1) - _auc_segment(ka_b, k_b, s0)
    return np.sum((doses / v[..., None]) * contrib, axis=-1)


def auc_window(params: IndividualPK, regimen: DoseRegimen, t0: float, t1: float) -> float:
    """AUC over the window [t0, t1]; t1 may be ``inf`` (total AUC)."""
    if not t0 < t1:
        raise InvalidParameterError("AUC window must satisfy t0 < t1")
    if math.isinf(t1):
        # every administration contributes dose/CL in total
        total = float(np.sum(regimen.doses)) / params.cl
        if t0 <= 0:
            return total
        head = float(_auc_window(params.ka, params.cl, params.v,
                                 regimen.doses, regimen.times, 0.0, t0))
        return total - head
    return float(_auc_window(params.ka, params.cl, params.v,
                             regimen.doses, regimen.times, t0, t1))


def auc24_after_last(params: IndividualPK, regimen: DoseRegimen) -> float:
    """AUC over the 24 h following the last delivered administration."""
    t_last = regimen.last_time
    return auc_window(params, regimen, t_last, t_last + 24.0)


def cmax(params: IndividualPK, regimen: DoseRegimen,
         t0: float = 0.0, t1: float | None = None) -> float:
    """Peak concentration over [t0, t1], searched per dosing interval.

    The one-compartment profile is unimodal between administrations, so a
    bounded scalar maximization inside each interval finds the global peak.
    """
    times = regimen.times
    if t1 is None:
        t1 = regimen.last_time + 24.0
    if not t0 < t1:
        raise InvalidParameterError("search window must satisfy t0 < t1")
    edges = sorted({t0, t1, *[t for t in times if t0 < t < t1]})
    best = max(concentration_at(params, regimen, t0),
               concentration_at(params, regimen, t1))
    for lo, hi in zip(edges, edges[1:]):
        res = minimize_scalar(
            lambda t: -concentration_at(params, regimen, t),
            bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-8 * max(hi, 1.0)})
        best = max(best, -res.fun)
    return float(best)


def ctrough(params: IndividualPK, regimen: DoseRegimen, at_time: float) -> float:
    """Concentration immediately before the administration scheduled at
    ``at_time`` (which must coincide with a scheduled administration)."""
    times = regimen.times
    if not np.any(np.isclose(times, at_time)):
        raise InvalidParameterError("Ctrough time must coincide with a scheduled administration")
    value = _profile(params.ka, params.cl, params.v, regimen.doses,
                     regimen.times, np.array([np.nextafter(at_time, -np.inf)]))[0]
    return float(value)


def derive_exposure(params: IndividualPK, regimen: DoseRegimen, kind: ExposureKind,
                    window: tuple[float, float] | None = None) -> float:
    """Exposure metric for one individual under the given regimen.

    For the AUC kinds, ``window`` defaults to the 24 h after the last
    administration (AUC24) or the full cycle through 24 h past the last
    administration (AUCCUM). For CTROUGH, the window end must be a scheduled
    administration time.
    """
    if kind is ExposureKind.AUC24:
        if window is None:
            return auc24_after_last(params, regimen)
        return auc_window(params, regimen, *window)
    if kind is ExposureKind.AUCCUM:
        if window is None:
            window = (0.0, regimen.last_time + 24.0)
        return auc_window(params, regimen, *window)
    if kind is ExposureKind.CMAX:
        if window is None:
            return cmax(params, regimen)
        return cmax(params, regimen, *window)
    if kind is ExposureKind.CTROUGH:
        if window is None:
            raise InvalidParameterError("Ctrough requires a window ending at an administration")
        return ctrough(params, regimen, window[1])
    raise InvalidParameterError(f"unsupported exposure kind: {kind!r}")


def simulate_individuals(pop: PopPKParams, n: int, seed) -> list[IndividualPK]:
    """Draw ``n`` individuals with lognormal IIV on ka and CL (V is fixed)."""
    if n < 1:
        raise InvalidParameterError("need n >= 1 individuals")
    rng = np.random.default_rng(seed)
    lka = rng.normal(math.log(pop.ka_pop), math.sqrt(pop.omega_ka_sq), size=n)
    lcl = rng.normal(math.log(pop.cl_pop), math.sqrt(pop.omega_cl_sq), size=n)
    return [IndividualPK(ka=math.exp(a), cl=math.exp(c), v=pop.v_pop)
            for a, c in zip(lka, lcl)]


def simulate_concentrations(ind: IndividualPK, regimen: DoseRegimen, times,
                            prop_error_sd: float, seed,
                            truncation_time: float | None = None,
                            patient_id: str = "") -> list[ConcentrationSample]:
    """Noisy samples c = f(t) * (1 + eps), eps ~ N(0, sd^2).

    Samples strictly after ``truncation_time`` are dropped (sampling stops
    once dosing stops). Concentrations are floored at zero.
    """
    times = [float(t) for t in times]
    if any(t < 0 for t in times):
        raise InvalidParameterError("sampling times must be nonnegative")
    rng = np.random.default_rng(seed)
    eps = rng.normal(0.0, 1.0, size=len(times))
    out = []
    for t, e in zip(times, eps):
        if truncation_time is not None and t > truncation_time:
            continue
        f = concentration_at(ind, regimen, t)
        out.append(ConcentrationSample(patient_id=patient_id, time_h=t,
                                       concentration=max(f * (1.0 + prop_error_sd * e), 0.0)))
    return out


# ---------------------------------------------------------------------------
# Population estimation (SAEM)
# ---------------------------------------------------------------------------


@dataclass
class SaemConfig:
    """Iteration budget and schedule for the SAEM fit."""

    n_burnin: int = 300
    n_smoothing: int = 100
    mh_sweeps: int = 2
    convergence_rtol: float = 1e-3
    anneal_floor_decay: float = 0.97
    seed: int = 0


@dataclass(frozen=True)
class PopPKFit:
    """Fitted population model with per-patient empirical estimates."""

    population: PopPKParams
    individual_estimates: dict[str, IndividualPK]
    log_likelihood: float
    trajectory: np.ndarray = field(repr=False, default=None)

    def sample_individuals(self, n: int, seed) -> list[IndividualPK]:
        return simulate_individuals(self.population, n, seed)

    def sample_exposures(self, regimen: DoseRegimen, kind: ExposureKind,
                         n_draws: int, seed) -> np.ndarray:
        return sample_population_exposure(self, regimen, kind, n_draws, seed)


def _exposure_vec(ka, cl, v, regimen: DoseRegimen, kind: ExposureKind) -> np.ndarray:
    """Vectorized exposure metric over arrays of individual parameters."""
    ka = np.asarray(ka, dtype=float)
    cl = np.asarray(cl, dtype=float)
    if kind is ExposureKind.AUC24:
        t_last = regimen.last_time
        return _auc_window(ka, cl, np.full_like(ka, v), regimen.doses,
                           regimen.times, t_last, t_last + 24.0)
    if kind is ExposureKind.AUCCUM:
        return _auc_window(ka, cl, np.full_like(ka, v), regimen.doses,
                           regimen.times, 0.0, regimen.last_time + 24.0)
    # Cmax / Ctrough are scalar searches; loop (rarely used in bulk).
    out = np.empty(ka.shape)
    flat_ka, flat_cl = ka.ravel(), cl.ravel()
    flat = out.ravel()
    for i in range(flat.size):
        ind = IndividualPK(ka=flat_ka[i], cl=flat_cl[i], v=v)
        if kind is ExposureKind.CMAX:
            flat[i] = cmax(ind, regimen)
        else:
            flat[i] = ctrough(ind, regimen, regimen.last_time)
    return out


def sample_population_exposure(fit: PopPKFit, regimen: DoseRegimen,
                               kind: ExposureKind, n_draws: int, seed) -> np.ndarray:
    """Draws from the population exposure distribution P(Z | regimen)."""
    if n_draws < 1:
        raise InvalidParameterError("need n_draws >= 1")
    pop = fit.population
    rng = np.random.default_rng(seed)
    lka = rng.normal(math.log(pop.ka_pop), math.sqrt(pop.omega_ka_sq), size=n_draws)
    lcl = rng.normal(math.log(pop.cl_pop), math.sqrt(pop.omega_cl_sq), size=n_draws)
    return _exposure_vec(np.exp(lka), np.exp(lcl), pop.v_pop, regimen, kind)


class _PatientBlock:
    """Padded arrays for one dataset: observation times/values and
    per-patient administration schedules.

    Elapsed-time entries for inactive (future or padded) administrations are
    set to a huge value so both exponentials underflow to exactly zero and no
    masking is needed in the inner loop.
    """

    _INACTIVE = 1e30

    def __init__(self, data: dict[str, list[ConcentrationSample]],
                 regimens: dict[str, DoseRegimen]):
        self.ids = sorted(data.keys())
        n = len(self.ids)
        max_obs = max(len(data[pid]) for pid in self.ids)
        max_adm = max(len(regimens[pid].administrations) for pid in self.ids)
        self.t = np.zeros((n, max_obs))
        self.y = np.zeros((n, max_obs))
        self.obs_mask = np.zeros((n, max_obs), dtype=bool)
        self.dose = np.zeros((n, max_adm))
        adm_t = np.zeros((n, max_adm))
        adm_mask = np.zeros((n, max_adm), dtype=bool)
        for i, pid in enumerate(self.ids):
            samples = data[pid]
            self.t[i, :len(samples)] = [s.time_h for s in samples]
            self.y[i, :len(samples)] = [s.concentration for s in samples]
            self.obs_mask[i, :len(samples)] = True
            reg = regimens[pid]
            L = len(reg.administrations)
            self.dose[i, :L] = reg.doses
            adm_t[i, :L] = reg.times
            adm_mask[i, :L] = True
        s = self.t[:, None, :] - adm_t[:, :, None]
        active = (s >= 0) & adm_mask[:, :, None]
        self.elapsed = np.where(active, s, self._INACTIVE)
        self.n_obs_total = int(self.obs_mask.sum())
        self.y_masked = np.where(self.obs_mask, self.y, 1.0)

    def predict(self, ka, cl, v):
        """Model concentrations, shape (n_patients, max_obs)."""
        k = (cl / v)[:, None, None]
        ka_b = ka[:, None, None]
        s = self.elapsed
        if not hasattr(self, "_buf1"):
            self._buf1 = np.empty_like(s)
            self._buf2 = np.empty_like(s)
        b1, b2 = self._buf1, self._buf2
        np.multiply(s, -k, out=b1)
        np.exp(b1, out=b1)                       # e^{-k s}
        diff = ka_b - k
        degenerate = np.abs(diff) < _KA_K_MERGE_RTOL * np.abs(k)
        if degenerate.any():
            # rare flip-flop limit; clarity over speed on this path
            safe = np.where(degenerate, 1.0, diff)
            regular = (ka_b / safe) * (b1 - np.exp(-ka_b * s))
            limit = k * s * b1
            term = (self.dose[:, :, None] / v) * np.where(degenerate, limit, regular)
            return np.sum(term, axis=1)
        np.multiply(s, -ka_b, out=b2)
        np.exp(b2, out=b2)                       # e^{-ka s}
        np.subtract(b1, b2, out=b1)
        np.multiply(b1, ka_b / diff, out=b1)
        np.multiply(b1, self.dose[:, :, None] / v, out=b1)
        return np.sum(b1, axis=1)

    def loglik_rows(self, ka, cl, v, b):
        """Per-patient residual log-likelihood under proportional error."""
        f = np.maximum(self.predict(ka, cl, v), _CONC_FLOOR)
        sd = b * f
        z = (self.y_masked - f) / sd
        ll = -0.5 * z**2 - np.log(sd) - 0.5 * math.log(2 * math.pi)
        return np.sum(np.where(self.obs_mask, ll, 0.0), axis=1)


def fit_poppk(data: dict[str, list[ConcentrationSample]],
              regimens: dict[str, DoseRegimen],
              init: PopPKParams,
              config: SaemConfig | None = None) -> PopPKFit:
    """Maximize the marginal likelihood of the mixed-effects model.

    ``data`` maps patient id -> concentration samples; ``regimens`` maps
    patient id -> the regimen actually delivered (truncated at a DLT when
    applicable). Individual estimates are posterior modes of the random
    effects given the population estimates.
    """
    config = config or SaemConfig()
    ids = sorted(data.keys())
    if len(ids) < 2:
        raise InvalidParameterError("population fit needs at least 2 patients")
    if any(len(data[pid]) < 3 for pid in ids):
        raise InvalidParameterError("each patient needs at least 3 samples")
    if set(ids) - set(regimens.keys()):
        raise InvalidParameterError("every patient needs a regimen")
    block = _PatientBlock(data, regimens)
    if np.all(block.y[block.obs_mask] <= 0):
        raise EstimationError("degenerate data: all concentrations are zero")

    rng = np.random.default_rng(config.seed)
    n = len(ids)
    m_ka = math.log(init.ka_pop)
    m_cl = math.log(init.cl_pop)
    log_v = math.log(init.v_pop)
    om_ka = max(init.omega_ka_sq, 0.05)
    om_cl = max(init.omega_cl_sq, 0.05)
    b = max(init.prop_error_sd, 1e-2)

    eta = np.zeros((n, 2))  # random effects (log ka, log cl) - population mean
    prop_log_sd = np.full(n, math.log(0.3))

    # sufficient-statistic accumulators
    s_ka1 = np.zeros(()); s_ka2 = np.zeros(())
    s_cl1 = np.zeros(()); s_cl2 = np.zeros(())
    s_b2 = 0.0
    s_logv = log_v

    n_iter = config.n_burnin + config.n_smoothing
    trajectory = np.zeros((n_iter, 6))

    def current_rows(eta_mat, lv):
        ka = np.exp(m_ka + eta_mat[:, 0])
        cl = np.exp(m_cl + eta_mat[:, 1])
        return block.loglik_rows(ka, cl, math.exp(lv), b)

    ll_rows = current_rows(eta, log_v)

    for it in range(n_iter):
        om_ka_eff = max(om_ka, 0.05 * config.anneal_floor_decay**it)
        om_cl_eff = max(om_cl, 0.05 * config.anneal_floor_decay**it)
        sd_prior = np.array([math.sqrt(om_ka_eff), math.sqrt(om_cl_eff)])

        # --- E-step: Metropolis sweeps on the random effects
        for _ in range(config.mh_sweeps):
            step = np.exp(prop_log_sd)[:, None] * sd_prior[None, :]
            prop = eta + rng.normal(size=(n, 2)) * step
            ll_prop = current_rows(prop, log_v)
            prior_cur = -0.5 * (eta[:, 0]**2 / om_ka_eff + eta[:, 1]**2 / om_cl_eff)
            prior_prop = -0.5 * (prop[:, 0]**2 / om_ka_eff + prop[:, 1]**2 / om_cl_eff)
            log_acc = (ll_prop + prior_prop) - (ll_rows + prior_cur)
            accept = np.log(rng.uniform(size=n)) < log_acc
            eta[accept] = prop[accept]
            ll_rows[accept] = ll_prop[accept]
            prop_log_sd += 0.3 * (accept.astype(float) - 0.35) / (1.0 + 0.05 * it)
            np.clip(prop_log_sd, math.log(1e-4), math.log(10.0), out=prop_log_sd)

        gamma = 1.0 if it < config.n_burnin else 1.0 / (it - config.n_burnin + 1)

        # --- SA update of the sufficient statistics for (mu, omega^2)
        lka_i = m_ka + eta[:, 0]
        lcl_i = m_cl + eta[:, 1]
        if it == 0:
            s_ka1, s_ka2 = lka_i.mean(), (lka_i**2).mean()
            s_cl1, s_cl2 = lcl_i.mean(), (lcl_i**2).mean()
        else:
            s_ka1 = s_ka1 + gamma * (lka_i.mean() - s_ka1)
            s_ka2 = s_ka2 + gamma * ((lka_i**2).mean() - s_ka2)
            s_cl1 = s_cl1 + gamma * (lcl_i.mean() - s_cl1)
            s_cl2 = s_cl2 + gamma * ((lcl_i**2).mean() - s_cl2)

        # keep eta centered when the population mean moves
        new_m_ka = float(s_ka1)
        new_m_cl = float(s_cl1)
        eta[:, 0] += m_ka - new_m_ka
        eta[:, 1] += m_cl - new_m_cl
        m_ka, m_cl = new_m_ka, new_m_cl
        om_ka = max(float(s_ka2 - s_ka1**2), 1e-8)
        om_cl = max(float(s_cl2 - s_cl1**2), 1e-8)

        # --- conditional M-step for V (1-D search, alternating iterations
        # once the fit has settled) and b (residual moment)
        ka_now = np.exp(m_ka + eta[:, 0])
        cl_now = np.exp(m_cl + eta[:, 1])

        if it < 100 or it % 2 == 0 or it >= config.n_burnin:
            def neg_ll_v(lv):
                return -np.sum(block.loglik_rows(ka_now, cl_now, math.exp(lv), b))

            half_width = 0.7 if it < 50 else 0.25
            res = minimize_scalar(neg_ll_v, bounds=(log_v - half_width, log_v + half_width),
                                  method="bounded", options={"xatol": 3e-4, "maxiter": 6})
            s_logv = s_logv + gamma * (float(res.x) - s_logv)
            log_v = float(s_logv)

        f = np.maximum(block.predict(ka_now, cl_now, math.exp(log_v)), _CONC_FLOOR)
        resid_sq = ((block.y_masked - f) / f)**2
        b_hat_sq = float(np.sum(np.where(block.obs_mask, resid_sq, 0.0)) / block.n_obs_total)
        s_b2 = s_b2 + gamma * (b_hat_sq - s_b2) if it else b_hat_sq
        b = max(math.sqrt(s_b2), 1e-4)

        sd = b * f
        z_resid = (block.y_masked - f) / sd
        ll = -0.5 * z_resid**2 - np.log(sd) - 0.5 * math.log(2 * math.pi)
        ll_rows = np.sum(np.where(block.obs_mask, ll, 0.0), axis=1)
        trajectory[it] = [m_ka, m_cl, log_v, om_ka, om_cl, b]

    # convergence: per-iteration change of the log-scale fixed effects must
    # have decayed below the threshold by the end of the smoothing phase
    steps = np.abs(np.diff(trajectory[-11:, :3], axis=0))
    if steps.size and steps.max() > config.convergence_rtol:
        raise EstimationError("population fit did not converge within the iteration budget",
                              trajectory=trajectory)

    population = PopPKParams(ka_pop=math.exp(m_ka), cl_pop=math.exp(m_cl),
                             v_pop=math.exp(log_v), omega_ka_sq=om_ka,
                             omega_cl_sq=om_cl, prop_error_sd=b)

    individuals, laplace_ll = _individual_modes(block, population)
    return PopPKFit(population=population, individual_estimates=individuals,
                    log_likelihood=laplace_ll, trajectory=trajectory)


def _individual_modes(block: _PatientBlock, pop: PopPKParams):
    """Posterior modes of the random effects and a Laplace marginal loglik."""
    m = np.array([math.log(pop.ka_pop), math.log(pop.cl_pop)])
    om = np.array([max(pop.omega_ka_sq, 1e-8), max(pop.omega_cl_sq, 1e-8)])
    individuals = {}
    total = 0.0
    for i, pid in enumerate(block.ids):
        sub = _PatientView(block, i)

        def neg_post(eta):
            ka = np.array([math.exp(m[0] + eta[0])])
            cl = np.array([math.exp(m[1] + eta[1])])
            ll = sub.loglik(ka, cl, pop.v_pop, pop.prop_error_sd)
            return -(ll - 0.5 * np.sum(eta**2 / om))

        res = minimize(neg_post, np.zeros(2), method="Nelder-Mead",
                       options={"xatol": 1e-4, "fatol": 1e-6, "maxiter": 200})
        eta = res.x
        individuals[pid] = IndividualPK(ka=math.exp(m[0] + eta[0]),
                                        cl=math.exp(m[1] + eta[1]), v=pop.v_pop)
        hess = _numeric_hessian(neg_post, eta)
        sign, logdet = np.linalg.slogdet(hess)
        if sign <= 0:
            logdet = 0.0
        total += (-res.fun - 0.5 * float(np.sum(np.log(om)))
                  - 0.5 * logdet + 0.5 * 2 * math.log(2 * math.pi)
                  - math.log(2 * math.pi))
    return individuals, float(total)


class _PatientView:
    def __init__(self, block: _PatientBlock, i: int):
        self.block = block
        self.i = i

    def loglik(self, ka, cl, v, b):
        blk = self.block
        i = self.i
        k = float(cl[0]) / v
        ka_s = float(ka[0])
        s = blk.elapsed[i]
        diff = ka_s - k
        if abs(diff) < _KA_K_MERGE_RTOL * abs(k):
            shape = k * s * np.exp(-k * s)
        else:
            shape = (ka_s / diff) * (np.exp(-k * s) - np.exp(-ka_s * s))
        f = np.maximum(np.sum((blk.dose[i][:, None] / v) * shape, axis=0), _CONC_FLOOR)
        sd = max(b, 1e-4) * f
        z = (blk.y_masked[i] - f) / sd
        ll = -0.5 * z**2 - np.log(sd) - 0.5 * math.log(2 * math.pi)
        return float(np.sum(np.where(blk.obs_mask[i], ll, 0.0)))


def _numeric_hessian(fn, x, h=1e-4):
    n = len(x)
    H = np.zeros((n, n))
    f0 = fn(x)
    for a in range(n):
        for c in range(a, n):
            xa = x.copy(); xa[a] += h; xa[c] += h
            xb = x.copy(); xb[a] += h
            xc = x.copy(); xc[c] += h
            H[a, c] = H[c, a] = (fn(xa) - fn(xb) - fn(xc) + f0) / h**2
    return H
