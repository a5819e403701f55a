"""Trial simulation: data generation, the adaptive designs, and operating
characteristics.

A simulated patient gets individual kinetics, a lognormal toxicity
sensitivity, and threshold-driven DLTs evaluated per administration; dosing
and blood sampling stop at the DLT. Endpoints are generated from the true
(truncated) exposure while all model fitting downstream uses exposures
estimated from noisy concentrations, mirroring how a real trial only sees
assay data.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .config import RunConfig, parse_config, read_flat_config
from .errors import (CalibrationError, EstimationError, InvalidParameterError,
                     SamplerError)
from .escalation import (EscalationSpec, EscalationState, calibrate_prior,
                         default_prior, escalation_review)
from .models import (EfficacyModel, PdyModel, SafetyModel, calibrate_logistic_prior)
from .pk import (DoseRegimen, ExposureKind, IndividualPK, PopPKFit, PopPKParams,
                 SaemConfig, _auc_segment, fit_poppk, simulate_concentrations)
from .recommend import endpoint_by_dose, recommend, u_probs
from .sampler import SamplerConfig

SAMPLING_TIMES = (0.5, 1, 2, 3, 4, 6, 8, 23.5, 25, 26, 27, 28,
                  30, 32, 47, 169, 176, 337, 344)


@dataclass(frozen=True)
class ToxScenario:
    """Threshold DLT process: DLT when sensitivity * exposure reaches tau."""

    omega_kappa: float
    tau: float

    def __post_init__(self):
        if self.omega_kappa <= 0 or self.tau <= 0:
            raise InvalidParameterError("toxicity scenario constants must be positive")


@dataclass(frozen=True)
class EffectScenario:
    """Linear-then-plateau mean with Gaussian patient variability."""

    upsilon0: float
    upsilon1: float
    z0: float
    noise_sd: float = 0.05

    def __post_init__(self):
        if self.noise_sd <= 0:
            raise InvalidParameterError("noise_sd must be positive")
        if self.z0 < 0:
            raise InvalidParameterError("plateau exposure must be nonnegative")

    def mean(self, z):
        return self.upsilon0 + self.upsilon1 * np.minimum(z, self.z0)


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation scenario: generators plus the candidate regimens."""

    label: str
    tox: ToxScenario
    pdy: EffectScenario
    eff: EffectScenario
    regimens: tuple[DoseRegimen, ...]
    pk: PopPKParams

    @property
    def doses(self) -> tuple[float, ...]:
        return tuple(r.doses[0] for r in self.regimens)


def _scenario_from_values(values: dict[str, str], label_fallback: str = "") -> ScenarioSpec:
    def get(key):
        if key not in values:
            raise InvalidParameterError(f"scenario file missing key {key!r}")
        return values[key]

    doses = tuple(float(v) for v in get("regimens.doses_mg").replace(",", " ").split())
    interval = float(get("regimens.interval_h"))
    n_adm = int(get("regimens.n_administrations"))
    regimens = tuple(
        DoseRegimen(tuple((d, interval * i) for i in range(n_adm)), label=f"R{j+1}")
        for j, d in enumerate(doses))
    return ScenarioSpec(
        label=values.get("scenario.label", label_fallback),
        tox=ToxScenario(float(get("tox.omega_kappa")), float(get("tox.tau"))),
        pdy=EffectScenario(float(get("pdy.upsilon0")), float(get("pdy.upsilon1")),
                           float(get("pdy.z0")), float(get("pdy.noise_sd"))),
        eff=EffectScenario(float(get("eff.upsilon0")), float(get("eff.upsilon1")),
                           float(get("eff.z0")), float(get("eff.noise_sd"))),
        regimens=regimens,
        pk=PopPKParams(float(get("pk.ka_pop")), float(get("pk.cl_pop")),
                       float(get("pk.v_pop")), float(get("pk.omega_ka_sq")),
                       float(get("pk.omega_cl_sq")), float(get("pk.prop_error_sd"))),
    )


def scenario_names() -> list[str]:
    files = resources.files("udespe").joinpath("scenarios")
    return sorted(",".join(p.name[2:-4]) for p in files.iterdir()
                  if p.name.endswith(".cfg"))


def load_scenario(name_or_path: str) -> ScenarioSpec:
    """Scenario by label ("2,1,1"), packaged file name, or explicit path."""
    if os.path.exists(name_or_path):
        return _scenario_from_values(read_flat_config(name_or_path))
    label = name_or_path.replace("{", "").replace("}", "").replace(" ", "")
    compact = label.replace(",", "")
    candidate = f"sc{compact}.cfg"
    files = resources.files("udespe").joinpath("scenarios")
    entry = files / candidate
    if not entry.is_file():
        known = ", ".join(scenario_names())
        raise InvalidParameterError(
            f"unknown scenario {name_or_path!r}; packaged scenarios: {known}")
    with resources.as_file(entry) as path:
        return _scenario_from_values(read_flat_config(str(path)), label)


# ---------------------------------------------------------------------------
# Patient-level data generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DltOutcome:
    w: int
    truncation_admin: int | None   # 1-based administration of the DLT
    observed_exposure: float
    truncation_time: float | None  # end of the DLT administration's window


def per_administration_auc24(ind: IndividualPK, regimen: DoseRegimen) -> np.ndarray:
    """AUC over the 24 h after each administration, honoring only the doses
    delivered up to that administration."""
    t = regimen.times
    d = regimen.doses
    k = ind.k
    s1 = np.maximum(t[:, None] + 24.0 - t[None, :], 0.0)
    s0 = np.maximum(t[:, None] - t[None, :], 0.0)
    delivered = t[None, :] <= t[:, None]
    contrib = _auc_segment(ind.ka, k, s1) - _auc_segment(ind.ka, k, s0)
    return np.sum(np.where(delivered, (d[None, :] / ind.v) * contrib, 0.0), axis=1)


def simulate_dlt_process(ind: IndividualPK, regimen: DoseRegimen, tox: ToxScenario,
                         seed) -> DltOutcome:
    """Draw the patient's sensitivity once and walk the administrations.

    The DLT fires at the first administration where sensitivity times the
    trailing 24 h exposure reaches the threshold (boundary inclusive); dosing
    stops there and the observed exposure is the one accrued under the
    truncated schedule.
    """
    rng = np.random.default_rng(seed)
    kappa = math.exp(rng.normal(0.0, tox.omega_kappa))
    z_per_admin = per_administration_auc24(ind, regimen)
    crossings = np.flatnonzero(kappa * z_per_admin >= tox.tau)
    if crossings.size == 0:
        return DltOutcome(w=0, truncation_admin=None,
                          observed_exposure=float(z_per_admin[-1]),
                          truncation_time=None)
    ell = int(crossings[0]) + 1
    return DltOutcome(w=1, truncation_admin=ell,
                      observed_exposure=float(z_per_admin[ell - 1]),
                      truncation_time=float(regimen.times[ell - 1] + 24.0))


def simulate_effect(z_true: float, sc: EffectScenario, seed) -> float:
    """One endpoint draw at the given true exposure."""
    if z_true < 0:
        raise InvalidParameterError("exposure must be nonnegative")
    rng = np.random.default_rng(seed)
    return float(rng.normal(sc.mean(z_true), sc.noise_sd))


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    regimen_index: int
    delivered: DoseRegimen
    dlt: int
    true_exposure: float
    pdy: float
    efficacy: float
    samples: tuple


def simulate_patient(pid: str, ind: IndividualPK, regimen_index: int,
                     scenario: ScenarioSpec, rng) -> PatientRecord:
    regimen = scenario.regimens[regimen_index]
    outcome = simulate_dlt_process(ind, regimen, scenario.tox,
                                   rng.integers(0, 2**63))
    delivered = (regimen if outcome.truncation_admin is None
                 else regimen.truncated(outcome.truncation_admin))
    samples = simulate_concentrations(
        ind, delivered, SAMPLING_TIMES, scenario.pk.prop_error_sd,
        seed=rng.integers(0, 2**63), truncation_time=outcome.truncation_time,
        patient_id=pid)
    pdy = simulate_effect(outcome.observed_exposure, scenario.pdy,
                          rng.integers(0, 2**63))
    eff = simulate_effect(outcome.observed_exposure, scenario.eff,
                          rng.integers(0, 2**63))
    return PatientRecord(patient_id=pid, regimen_index=regimen_index,
                         delivered=delivered, dlt=outcome.w,
                         true_exposure=outcome.observed_exposure,
                         pdy=pdy, efficacy=eff, samples=tuple(samples))


# ---------------------------------------------------------------------------
# Patient allocation
# ---------------------------------------------------------------------------


def allocate_weighted(n: int, u, mode: str = "all_tolerated") -> np.ndarray:
    """Integer patient counts proportional to the selection probabilities.

    Nearest-integer rounding can overshoot or undershoot the total, so the
    counts are settled by largest remainder (ties to the lower regimen). In
    ``top_two`` mode the probabilities are first renormalized over the two
    most probable regimens.
    """
    u = np.asarray(u, dtype=float)
    if n < 1:
        raise InvalidParameterError("need n >= 1 patients to allocate")
    if u.ndim != 1 or u.size == 0 or np.any(u < 0):
        raise InvalidParameterError("probabilities must be a nonnegative vector")
    if u.sum() <= 0:
        raise InvalidParameterError("all-zero allocation probabilities")
    if mode not in ("all_tolerated", "top_two"):
        raise InvalidParameterError("mode must be 'all_tolerated' or 'top_two'")
    if mode == "top_two" and u.size > 2:
        order = np.lexsort((np.arange(u.size), -u))
        keep = np.sort(order[:2])
        masked = np.zeros_like(u)
        masked[keep] = u[keep]
        u = masked
    probs = u / u.sum()
    raw = n * probs
    base = np.floor(raw).astype(int)
    short = n - int(base.sum())
    remainders = raw - base
    # ties toward the lower index: stable sort on (-remainder, index)
    order = np.lexsort((np.arange(u.size), -remainders))
    base[order[:short]] += 1
    return base


# ---------------------------------------------------------------------------
# Trial execution
# ---------------------------------------------------------------------------


@dataclass
class TrialResult:
    design: str
    scenario: str
    seed: int
    stop_reason: str | None          # "all_toxic" when no regimen was safe
    escalation_reason: str | None    # why the escalation stage ended
    mtd: int | None
    mgd: int | None
    od: int | None
    u: tuple = ()
    none_mass: float = 0.0
    n_per_regimen: tuple = ()
    dlt_per_regimen: tuple = ()
    fit_failed: bool = False
    failure: str = ""
    max_rhat: float = float("nan")
    escalation_audit: tuple = ()     # (dose, admissible, highest_before, overdose_probs)

    @property
    def total_n(self) -> int:
        return int(sum(self.n_per_regimen))


def _sampler_cfg(budget, seed) -> SamplerConfig:
    chains, warmup, draws = budget
    return SamplerConfig(n_chains=chains, n_warmup=warmup, n_draws=draws, seed=seed)


def run_escalation_stage(scenario: ScenarioSpec, spec: EscalationSpec, prior,
                         budget, rng, patients: list, start_id: int = 0):
    """BLRM escalation loop; appends simulated patients, returns the final
    decision, state, and the per-cohort audit trail."""
    state = EscalationState(n_doses=len(scenario.regimens))
    audit = []
    pid = start_id
    while True:
        decision = escalation_review(state, spec, prior,
                                     _sampler_cfg(budget, rng.integers(0, 2**63)))
        if decision.action == "stop":
            return decision, state, audit
        audit.append((decision.dose, tuple(int(a) for a in decision.admissible),
                      state.highest_tried,
                      tuple(float(v) for v in decision.overdose_prob)))
        dlts = 0
        for _ in range(spec.cohort_size):
            ind = _draw_individual(scenario.pk, rng)
            record = simulate_patient(f"p{pid:04d}", ind, decision.dose, scenario, rng)
            patients.append(record)
            dlts += record.dlt
            pid += 1
        state.record_cohort(decision.dose, spec.cohort_size, dlts)


def _draw_individual(pop: PopPKParams, rng) -> IndividualPK:
    lka = rng.normal(math.log(pop.ka_pop), math.sqrt(pop.omega_ka_sq))
    lcl = rng.normal(math.log(pop.cl_pop), math.sqrt(pop.omega_cl_sq))
    return IndividualPK(ka=math.exp(lka), cl=math.exp(lcl), v=pop.v_pop)


def _fit_stage(patients: list, scenario: ScenarioSpec, config: RunConfig, rng,
               tolerated: list[int]):
    """PK fit, exposure estimation, the three endpoint fits, and the
    marginalized endpoint draws over the tolerated regimens."""
    data = {p.patient_id: list(p.samples) for p in patients}
    regimens = {p.patient_id: p.delivered for p in patients}
    saem = SaemConfig(n_burnin=config["pk_fit.n_burnin"],
                      n_smoothing=config["pk_fit.n_smoothing"],
                      convergence_rtol=config["pk_fit.convergence_rtol"],
                      seed=int(rng.integers(0, 2**63)))
    pk_fit = fit_poppk(data, regimens, config.pk_init(), saem)

    z_est = np.array([
        _estimated_exposure(pk_fit.individual_estimates[p.patient_id], p.delivered)
        for p in patients
    ])
    w = np.array([p.dlt for p in patients])
    r = np.array([p.pdy for p in patients])
    s = np.array([p.efficacy for p in patients])

    z_ref = config["recommend.z_ref"]
    if config["safety.prior"] == "calibrated":
        anchors = [
            float(np.median(pk_fit.sample_exposures(
                scenario.regimens[j], config.metric_map()["safety"], 2001,
                seed=int(rng.integers(0, 2**63)))))
            for j in (0, len(scenario.regimens) - 1)
        ]
        mu_s, cov_s = calibrate_logistic_prior(anchors[0], anchors[1], z_ref,
                                               config["gain.delta_min"],
                                               config["gain.delta_max"])
    else:
        mu_s, cov_s = default_prior()
    chains, warmup, draws = config.sampler_budget()
    common = dict(n_chains=chains, n_warmup=warmup, n_draws=draws,
                  strict_diagnostics=False)
    safety = SafetyModel(z_ref=z_ref, prior_mean=mu_s, prior_cov=cov_s,
                         **common).fit(z_est, w, seed=int(rng.integers(0, 2**63)))
    pdy = PdyModel(z_ref=z_ref, threshold_c=config["recommend.threshold_c"],
                   **common).fit(z_est, r, seed=int(rng.integers(0, 2**63)))
    efficacy = EfficacyModel(z_ref=z_ref, **common).fit(
        z_est, s, seed=int(rng.integers(0, 2**63)))

    ebd = endpoint_by_dose(
        pk_fit, safety, pdy, efficacy,
        [scenario.regimens[j] for j in tolerated],
        metric_map=config.metric_map(),
        m_draws=min(config["recommend.m_draws"], chains * draws),
        k_draws=config["recommend.k_draws"],
        seed=int(rng.integers(0, 2**63)),
        threshold_c=config["recommend.threshold_c"])
    max_rhat = max(safety.max_rhat_, pdy.max_rhat_, efficacy.max_rhat_)
    return ebd, max_rhat


def _estimated_exposure(ind: IndividualPK, delivered: DoseRegimen) -> float:
    z = per_administration_auc24(ind, delivered)[-1]
    return float(max(z, 1e-9))


def run_trial(design: str, scenario: ScenarioSpec, config: RunConfig | None = None,
              seed: int = 0) -> TrialResult:
    """Simulate one trial of the requested design.

    ``one_step`` spends the whole budget on escalation; ``two_step`` runs one
    probability-weighted randomization stage after escalation; ``multi_step``
    reallocates cohort by cohort, refitting everything in between.
    """
    design = design.replace("-", "_")
    if design not in ("one_step", "two_step", "multi_step"):
        raise InvalidParameterError("design must be one-step, two-step, or multi-step")
    config = config or parse_config()
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD05E)))
    n_esc = config["budget.n_escalation"]
    n_opt = config["budget.n_optimization"]
    if design == "one_step":
        n_esc, n_opt = n_esc + n_opt, 0

    esc_spec = EscalationSpec(
        doses=scenario.doses, d_ref=config["escalation.d_ref"],
        delta_min=config["gain.delta_min"], delta_max=config["gain.delta_max"],
        ewoc=config["escalation.ewoc"], cohort_size=config["escalation.cohort_size"],
        max_n=n_esc, accuracy_threshold=config["escalation.accuracy_threshold"],
        accuracy_cohorts=config["escalation.accuracy_cohorts"],
        selection=config["escalation.selection"])
    prior = (calibrate_prior(esc_spec) if config["escalation.prior"] == "calibrated"
             else default_prior())

    patients: list[PatientRecord] = []
    decision, state, audit = run_escalation_stage(
        scenario, esc_spec, prior, config.sampler_budget(), rng, patients)

    base = TrialResult(
        design=design, scenario=scenario.label, seed=seed,
        stop_reason=None, escalation_reason=decision.reason,
        mtd=decision.mtd, mgd=None, od=None,
        n_per_regimen=tuple(_count_patients(patients, len(scenario.regimens))),
        dlt_per_regimen=tuple(_count_dlts(patients, len(scenario.regimens))),
        escalation_audit=tuple(audit))

    if decision.mtd is None:
        base.stop_reason = "all_toxic"
        return base

    tolerated = list(range(decision.mtd + 1))
    gain_params = config.gain_params()
    x_percent = config["recommend.x_percent"]
    alloc_mode = ("top_two" if config["alloc_mode"] == "top-two" else "all_tolerated")

    try:
        if design == "two_step" and n_opt > 0:
            ebd, _ = _fit_stage(patients, scenario, config, rng, tolerated)
            u0, _ = u_probs(ebd, gain_params, x_percent=0.0)
            counts = _allocation_counts(u0, n_opt, alloc_mode, tolerated)
            pid = len(patients)
            for j, count in zip(tolerated, counts):
                for _ in range(count):
                    ind = _draw_individual(scenario.pk, rng)
                    patients.append(simulate_patient(f"p{pid:04d}", ind, j, scenario, rng))
                    pid += 1
        elif design == "multi_step" and n_opt > 0:
            cohort = config["escalation.cohort_size"]
            pid = len(patients)
            remaining = n_opt
            while remaining >= cohort:
                ebd, _ = _fit_stage(patients, scenario, config, rng, tolerated)
                u0, _ = u_probs(ebd, gain_params, x_percent=0.0)
                probs = _renormalized(u0)
                j = int(rng.choice(len(tolerated), p=probs))
                for _ in range(cohort):
                    ind = _draw_individual(scenario.pk, rng)
                    patients.append(simulate_patient(f"p{pid:04d}", ind,
                                                     tolerated[j], scenario, rng))
                    pid += 1
                remaining -= cohort

        ebd, max_rhat = _fit_stage(patients, scenario, config, rng, tolerated)
        rec = recommend(ebd, gain_params, x_percent)
    except (EstimationError, SamplerError, CalibrationError, InvalidParameterError) as exc:
        base.fit_failed = True
        base.failure = f"{type(exc).__name__}: {exc}"
        base.n_per_regimen = tuple(_count_patients(patients, len(scenario.regimens)))
        base.dlt_per_regimen = tuple(_count_dlts(patients, len(scenario.regimens)))
        return base

    base.mgd = tolerated[rec.mgd] if rec.mgd is not None else None
    base.od = tolerated[rec.od] if rec.od is not None else None
    base.u = tuple(rec.u)
    base.none_mass = rec.none_mass
    base.max_rhat = max_rhat
    base.n_per_regimen = tuple(_count_patients(patients, len(scenario.regimens)))
    base.dlt_per_regimen = tuple(_count_dlts(patients, len(scenario.regimens)))
    return base


def _renormalized(u: np.ndarray) -> np.ndarray:
    total = u.sum()
    if total <= 0:
        # every posterior draw vetoed every tolerated regimen: fall back to
        # the least toxic one rather than abandoning the stage
        out = np.zeros_like(u)
        out[0] = 1.0
        return out
    return u / total


def _allocation_counts(u0, n_opt, mode, tolerated):
    probs = _renormalized(np.asarray(u0, dtype=float))
    return allocate_weighted(n_opt, probs, mode=mode)


def _count_patients(patients, n_regimens):
    counts = np.zeros(n_regimens, dtype=int)
    for p in patients:
        counts[p.regimen_index] += 1
    return counts


def _count_dlts(patients, n_regimens):
    counts = np.zeros(n_regimens, dtype=int)
    for p in patients:
        counts[p.regimen_index] += p.dlt
    return counts


# ---------------------------------------------------------------------------
# Replication harness and summaries
# ---------------------------------------------------------------------------


def _one_replicate(args):
    design, scenario, config_values, master_seed, index = args
    config = RunConfig(values=config_values)
    scenario_spec = scenario if isinstance(scenario, ScenarioSpec) else load_scenario(scenario)
    rep_seed = int(np.random.SeedSequence((master_seed, index)).generate_state(1)[0])
    return run_trial(design, scenario_spec, config, seed=rep_seed)


def run_batch(design: str, scenario: ScenarioSpec | str, n_replicates: int,
              config: RunConfig | None = None, master_seed: int = 1,
              n_workers: int | None = None) -> list[TrialResult]:
    """Independent replicates with per-replicate derived seeds.

    Results are returned in replicate order regardless of scheduling, so a
    batch is reproducible under any worker count.
    """
    config = config or parse_config()
    if isinstance(scenario, str):
        scenario = load_scenario(scenario)
    if n_workers is None:
        n_workers = config["threads"] or os.cpu_count() or 1
    jobs = [(design, scenario, config.values, master_seed, i)
            for i in range(n_replicates)]
    if n_workers <= 1:
        return [_one_replicate(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_one_replicate, jobs, chunksize=4))


@dataclass
class OperatingCharacteristics:
    """Aggregated selection frequencies in the layout of the results table."""

    n_replicates: int
    n_regimens: int
    stop_pct: float
    mtd_pct: np.ndarray
    mgd_pct: np.ndarray
    od_pct: np.ndarray
    mgd_none_pct: float
    od_none_pct: float
    mean_patients: np.ndarray
    fit_failures: int

    def rows(self):
        yield ("stop%", self.stop_pct)
        yield ("MTD%", self.mtd_pct)
        yield ("MGD%", self.mgd_pct)
        yield ("OD%", self.od_pct)
        yield ("patients", self.mean_patients)


def operating_characteristics(results: list[TrialResult]) -> OperatingCharacteristics:
    if not results:
        raise InvalidParameterError("no trial results to summarize")
    n_regimens = len(results[0].n_per_regimen)
    R = len(results)
    stop = sum(1 for r in results if r.stop_reason == "all_toxic")
    mtd = np.zeros(n_regimens)
    mgd = np.zeros(n_regimens)
    od = np.zeros(n_regimens)
    patients = np.zeros(n_regimens)
    failures = 0
    for r in results:
        if r.mtd is not None:
            mtd[r.mtd] += 1
        if r.mgd is not None:
            mgd[r.mgd] += 1
        if r.od is not None:
            od[r.od] += 1
        patients += np.asarray(r.n_per_regimen)
        failures += int(r.fit_failed)
    return OperatingCharacteristics(
        n_replicates=R, n_regimens=n_regimens,
        stop_pct=100.0 * stop / R,
        mtd_pct=100.0 * mtd / R, mgd_pct=100.0 * mgd / R, od_pct=100.0 * od / R,
        mgd_none_pct=100.0 * (R - stop - mgd.sum()) / R if R else 0.0,
        od_none_pct=100.0 * (R - stop - od.sum()) / R if R else 0.0,
        mean_patients=patients / R,
        fit_failures=failures)
