"""Regimen-level endpoint marginalization, the gain function, and the
MGD-x% / OD-x% recommendation rules.

Posterior draws of each endpoint are pushed from exposure to regimen level
by averaging over fresh population-exposure draws (the law of total
probability applied with the fitted PK model). Gains combine efficacy,
target engagement, and a toxicity penalty with a hard veto above the upper
toxicity bound; recommendations pick the lowest regimen whose relative gain
shortfall is negligible, or the regimen most often in that position across
posterior draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .errors import InvalidParameterError, NoAdmissibleRegimenError
from .models import EfficacyModel, PdyModel, SafetyModel
from .pk import DoseRegimen, ExposureKind, PopPKFit, _exposure_vec

DEFAULT_X_PERCENT = 1.0


@dataclass(frozen=True)
class GainParams:
    """Weights and toxicity bounds of the gain function."""

    alpha1: float = 2.0
    alpha2: float = 1.0
    alpha3: float = -4.0
    delta_min: float = 0.20
    delta_max: float = 0.33

    def __post_init__(self):
        if not 0.0 < self.delta_min < self.delta_max < 1.0:
            raise InvalidParameterError("need 0 < delta_min < delta_max < 1")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise InvalidParameterError("efficacy and engagement weights must be >= 0")
        if self.alpha3 > 0:
            raise InvalidParameterError("toxicity weight must be <= 0")


def gain(p: float, q: float, s: float, params: GainParams) -> float:
    """Gain for one (toxicity, engagement, efficacy) triple; -inf if unsafe."""
    if not (0.0 <= p <= 1.0 and 0.0 <= q <= 1.0 and np.isfinite(s)):
        raise InvalidParameterError("endpoint values out of range")
    return float(gain_vec(np.array([p]), np.array([q]), np.array([s]), params)[0])


def gain_vec(p: np.ndarray, q: np.ndarray, s: np.ndarray, params: GainParams) -> np.ndarray:
    base = params.alpha1 * s + params.alpha2 * q
    penalized = base + params.alpha3 * (p - params.delta_min)
    out = np.where(p < params.delta_min, base, penalized)
    return np.where(p >= params.delta_max, -np.inf, out)


def relative_gain(gains) -> np.ndarray:
    """RG_j = (G_max - G_j) / |G_j|; +inf for vetoed regimens.

    A zero gain maps to +inf when some other regimen improves on it, and to
    0 when it is itself the maximum.
    """
    g = np.asarray(gains, dtype=float)
    if g.size == 0 or np.all(np.isneginf(g)):
        raise NoAdmissibleRegimenError("all candidate regimens carry gain -inf")
    if np.any(np.isposinf(g)) or np.any(np.isnan(g)):
        raise InvalidParameterError("gains must be finite or -inf")
    g_max = g.max()
    out = np.full(g.shape, np.inf)
    finite = np.isfinite(g)
    nonzero = finite & (g != 0.0)
    out[nonzero] = (g_max - g[nonzero]) / np.abs(g[nonzero])
    zero = finite & (g == 0.0)
    out[zero] = np.where(g_max > 0.0, np.inf, 0.0)
    return out


def mgd_x(rg, x_percent: float = DEFAULT_X_PERCENT) -> int:
    """Lowest regimen index whose relative gain shortfall is <= x%."""
    rg = np.asarray(rg, dtype=float)
    hits = np.flatnonzero(rg <= x_percent / 100.0)
    if hits.size == 0:
        raise NoAdmissibleRegimenError("no regimen within the relative-gain tolerance")
    return int(hits[0])


def od_x(u) -> int | None:
    """Regimen with the highest probability of being the MGD-x%; ties go to
    the lowest index; None when every draw was inadmissible."""
    u = np.asarray(u, dtype=float)
    if u.sum() > 1.0 + 1e-9:
        raise InvalidParameterError("probabilities must sum to at most 1")
    if np.all(u == 0.0):
        return None
    return int(np.argmax(u))


@dataclass(frozen=True)
class EndpointByDose:
    """Aligned per-regimen posterior draw sets of the three endpoints.

    Row m of each array was produced by the same posterior-parameter draw
    for every regimen, so per-draw comparisons across regimens are coherent.
    """

    labels: tuple[str, ...]
    p: np.ndarray  # (M, J) population DLT probability
    q: np.ndarray  # (M, J) population target-engagement probability
    s: np.ndarray  # (M, J) population mean efficacy

    def __post_init__(self):
        if not (self.p.shape == self.q.shape == self.s.shape):
            raise InvalidParameterError("endpoint draw sets must share shape")
        if self.p.shape[1] != len(self.labels):
            raise InvalidParameterError("one label per regimen required")
        if np.any((self.p <= 0) | (self.p >= 1)):
            raise InvalidParameterError("p draws must lie in (0, 1)")
        if np.any((self.q < 0) | (self.q > 1)):
            raise InvalidParameterError("q draws must lie in [0, 1]")

    @property
    def n_draws(self) -> int:
        return self.p.shape[0]

    @property
    def n_regimens(self) -> int:
        return self.p.shape[1]


def u_probs(ebd: EndpointByDose, params: GainParams,
            x_percent: float = DEFAULT_X_PERCENT) -> tuple[np.ndarray, float]:
    """Per-regimen probability of being the MGD-x% across posterior draws.

    Returns (u, none_mass): draws where every regimen is vetoed contribute
    to ``none_mass``; u + none_mass sums to exactly 1.
    """
    if ebd.n_draws == 0:
        raise InvalidParameterError("no posterior draws")
    gains = gain_vec(ebd.p, ebd.q, ebd.s, params)      # (M, J)
    M, J = gains.shape
    counts = np.zeros(J, dtype=np.int64)
    none = 0
    threshold = x_percent / 100.0
    g_max = gains.max(axis=1)
    all_vetoed = np.isneginf(g_max)
    none = int(all_vetoed.sum())
    live = ~all_vetoed
    g = gains[live]
    gm = g_max[live][:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        rg = np.where(np.isneginf(g), np.inf,
                      np.where(g != 0.0, (gm - g) / np.abs(g),
                               np.where(gm > 0.0, np.inf, 0.0)))
    winners = np.argmax(rg <= threshold, axis=1)
    counts += np.bincount(winners, minlength=J)
    return counts / M, none / M


def plugin_gains(ebd: EndpointByDose, params: GainParams) -> np.ndarray:
    """Gains evaluated at the posterior-mean endpoints (plug-in estimator)."""
    return gain_vec(ebd.p.mean(axis=0), ebd.q.mean(axis=0),
                    ebd.s.mean(axis=0), params)


@dataclass(frozen=True)
class Recommendation:
    """Per-regimen gain summary and the MGD-x% / OD-x% selections."""

    labels: tuple[str, ...]
    x_percent: float
    mean_p: np.ndarray
    mean_q: np.ndarray
    mean_s: np.ndarray
    gains: np.ndarray
    rg: np.ndarray
    u: np.ndarray
    none_mass: float
    mgd: int | None
    od: int | None

    def table_rows(self):
        """Rows (label, mean p, q, s, gain, rg, u, flags) for text output."""
        rows = []
        for j, label in enumerate(self.labels):
            flags = []
            if self.mgd == j:
                flags.append(f"MGD-{self.x_percent:g}%")
            if self.od == j:
                flags.append(f"OD-{self.x_percent:g}%")
            rows.append((label, self.mean_p[j], self.mean_q[j], self.mean_s[j],
                         self.gains[j], self.rg[j], self.u[j], "+".join(flags)))
        return rows


def recommend(ebd: EndpointByDose, params: GainParams | None = None,
              x_percent: float = DEFAULT_X_PERCENT) -> Recommendation:
    """Full recommendation from aligned endpoint draws."""
    params = params or GainParams()
    gains = plugin_gains(ebd, params)
    u, none_mass = u_probs(ebd, params, x_percent)
    try:
        rg = relative_gain(gains)
        mgd = mgd_x(rg, x_percent)
    except NoAdmissibleRegimenError:
        rg = np.full(ebd.n_regimens, np.inf)
        mgd = None
    return Recommendation(labels=ebd.labels, x_percent=x_percent,
                          mean_p=ebd.p.mean(axis=0), mean_q=ebd.q.mean(axis=0),
                          mean_s=ebd.s.mean(axis=0), gains=gains, rg=rg,
                          u=u, none_mass=none_mass, mgd=mgd, od=od_x(u))


def endpoint_by_dose(pk_fit: PopPKFit, safety: SafetyModel, pdy: PdyModel,
                     efficacy: EfficacyModel, regimens: list[DoseRegimen],
                     metric_map: dict[str, ExposureKind] | None = None,
                     m_draws: int = 2000, k_draws: int = 100, seed: int = 0,
                     threshold_c: float | None = None,
                     chunk: int = 256) -> EndpointByDose:
    """Marginalize the fitted exposure-response models over the population
    exposure distribution of each candidate regimen.

    For posterior draw m, ``k_draws`` individuals are sampled from the
    fitted PK population (shared across regimens, so identical regimens get
    identical endpoint draws) and the endpoint under draw m is averaged over
    their exposures.
    """
    if m_draws < 1 or k_draws < 1:
        raise InvalidParameterError("need m_draws >= 1 and k_draws >= 1")
    if not regimens:
        raise InvalidParameterError("need at least one candidate regimen")
    labels = [r.label for r in regimens]
    if len(set(labels)) != len(labels):
        raise InvalidParameterError("regimen labels must be unique")
    metric_map = metric_map or {}
    kinds = {name: metric_map.get(name, ExposureKind.AUC24)
             for name in ("safety", "pdy", "efficacy")}

    rng = np.random.default_rng(seed)
    pop = pk_fit.population

    # exposure metrics of linear kinetics scale with a uniform dose factor,
    # so regimens sharing one schedule need a single exposure evaluation
    base = regimens[0]
    scale = np.empty(len(regimens))
    proportional = True
    for j, reg in enumerate(regimens):
        same_times = (len(reg.administrations) == len(base.administrations)
                      and np.allclose(reg.times, base.times))
        ratio = reg.doses / base.doses if same_times else None
        if same_times and np.allclose(ratio, ratio[0]):
            scale[j] = ratio[0]
        else:
            proportional = False
            break

    def pick(draw_count):
        if draw_count < m_draws:
            raise InvalidParameterError(
                f"model has only {draw_count} posterior draws, need {m_draws}")
        return np.linspace(0, draw_count - 1, m_draws).astype(int)

    phi = safety.phi_[pick(len(safety.phi_))]
    beta = pdy.beta_[pick(len(pdy.beta_))]
    sigma_r = pdy.sigma_[pick(len(pdy.sigma_))]
    gamma0 = efficacy.gamma0_[pick(len(efficacy.gamma0_))]
    gamma = efficacy.gamma_[pick(len(efficacy.gamma_))]
    c = pdy.threshold_c if threshold_c is None else threshold_c

    J = len(regimens)
    p_out = np.empty((m_draws, J))
    q_out = np.empty((m_draws, J))
    s_out = np.empty((m_draws, J))

    needed_kinds = sorted({k.value for k in kinds.values()})
    for start in range(0, m_draws, chunk):
        stop = min(start + chunk, m_draws)
        mb = stop - start
        lka = rng.normal(math.log(pop.ka_pop), math.sqrt(pop.omega_ka_sq), (mb, k_draws))
        lcl = rng.normal(math.log(pop.cl_pop), math.sqrt(pop.omega_cl_sq), (mb, k_draws))
        ka = np.exp(lka).ravel()
        cl = np.exp(lcl).ravel()
        if proportional:
            base_z = {kind: _exposure_vec(ka, cl, pop.v_pop, base,
                                          ExposureKind(kind)).reshape(mb, k_draws)
                      for kind in needed_kinds}
        for j, regimen in enumerate(regimens):
            if proportional:
                z_by_kind = {kind: scale[j] * base_z[kind] for kind in needed_kinds}
            else:
                z_by_kind = {
                    kind: _exposure_vec(ka, cl, pop.v_pop, regimen,
                                        ExposureKind(kind)).reshape(mb, k_draws)
                    for kind in needed_kinds
                }
            z_saf = z_by_kind[kinds["safety"].value]
            eta = (phi[start:stop, 0:1]
                   + np.exp(phi[start:stop, 1:2]) * np.log(z_saf / safety.z_ref))
            p_out[start:stop, j] = expit(eta).mean(axis=1)

            z_pdy = z_by_kind[kinds["pdy"].value]
            mean_r = (beta[start:stop, 0:1]
                      + beta[start:stop, 1:2] * np.log(z_pdy / pdy.z_ref))
            q = norm.sf((c - mean_r) / sigma_r[start:stop, None])
            q_out[start:stop, j] = q.mean(axis=1)

            z_eff = z_by_kind[kinds["efficacy"].value]
            B = efficacy.basis_.design(z_eff.ravel()).reshape(mb, k_draws, -1)
            s_mean = gamma0[start:stop, None] + np.einsum(
                "ml,mkl->mk", gamma[start:stop], B)
            s_out[start:stop, j] = s_mean.mean(axis=1)

    return EndpointByDose(labels=tuple(labels), p=p_out, q=q_out, s=s_out)
