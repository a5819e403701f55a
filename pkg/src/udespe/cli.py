"""Command-line front end: simulate, recommend, escalate, defaults.

All outputs are UTF-8 delimited text. Numeric cells are printed with a
configurable number of significant digits (4 by default) and parse back
losslessly at that precision.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .config import RunConfig, format_defaults, parse_config, read_flat_config
from .design import (load_scenario, operating_characteristics, run_batch)
from .errors import ConfigError, UdespeError
from .escalation import (EscalationSpec, EscalationState, calibrate_prior,
                         default_prior, fit_blrm_dose, next_dose)
from .models import EfficacyModel, PdyModel, SafetyModel, calibrate_logistic_prior
from .pk import DoseRegimen, PopPKParams, SaemConfig, fit_poppk
from .recommend import endpoint_by_dose, recommend
from .sampler import SamplerConfig

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _fmt(value, digits):
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if not np.isfinite(value):
        return str(value)
    return format(value, f".{digits}g")


def _write_csv(path, header, rows, digits):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([cell if isinstance(cell, str) else _fmt(cell, digits)
                             for cell in row])


def _build_parser():
    parser = argparse.ArgumentParser(prog="udespe",
                                     description="Bayesian dose-regimen optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="replicate simulated trials")
    sim.add_argument("--config", default=None)
    sim.add_argument("--replicates", type=int, default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--out", default=None)
    sim.add_argument("--design", choices=["one-step", "two-step", "multi-step"],
                     default=None)
    sim.add_argument("--alloc-mode", choices=["all", "top-two"], default=None)
    sim.add_argument("--threads", type=int, default=None)

    rec = sub.add_parser("recommend", help="recommend from observed data files")
    rec.add_argument("--config", default=None)
    rec.add_argument("--concentrations", default=None)
    rec.add_argument("--outcomes", default=None)
    rec.add_argument("--regimens", default=None)
    rec.add_argument("--out", default=None)
    rec.add_argument("--seed", type=int, default=None)

    esc = sub.add_parser("escalate", help="next-dose decision from a state file")
    esc.add_argument("--config", default=None)
    esc.add_argument("--state", required=True)
    esc.add_argument("--seed", type=int, default=None)

    sub.add_parser("defaults", help="print every config key with its default")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    mapping = {
        "replicates": "replicates", "seed": "seed", "out": "out",
        "design": "design", "alloc_mode": "alloc_mode", "threads": "threads",
        "concentrations": "data.concentrations", "outcomes": "data.outcomes",
        "regimens": "data.regimens",
    }
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if "threads" not in overrides and os.environ.get("UDESPE_THREADS"):
        overrides["threads"] = os.environ["UDESPE_THREADS"]
    return parse_config(getattr(args, "config", None), overrides)


def _cmd_simulate(args) -> int:
    config = _load_config(args)
    digits = config["print.digits"]
    scenario = load_scenario(config["scenario"])
    design = config["design"]
    out_dir = config["out"]
    os.makedirs(out_dir, exist_ok=True)

    results = run_batch(design, scenario, config["replicates"], config,
                        master_seed=config["seed"],
                        n_workers=config["threads"] or None)

    J = len(scenario.regimens)
    labels = [r.label for r in scenario.regimens]
    raw_header = (["replicate", "seed", "design", "scenario", "stop_reason",
                   "escalation_reason", "mtd", "mgd", "od", "none_mass",
                   "fit_failed", "max_rhat"]
                  + [f"n_{lab}" for lab in labels]
                  + [f"dlt_{lab}" for lab in labels]
                  + [f"u_{lab}" for lab in labels])
    raw_rows = []
    for i, res in enumerate(results):
        u = list(res.u) + [0.0] * (J - len(res.u))
        raw_rows.append(
            [i, res.seed, res.design, res.scenario, res.stop_reason or "",
             res.escalation_reason or "",
             "" if res.mtd is None else res.mtd + 1,
             "" if res.mgd is None else res.mgd + 1,
             "" if res.od is None else res.od + 1,
             res.none_mass, int(res.fit_failed), res.max_rhat]
            + list(res.n_per_regimen) + list(res.dlt_per_regimen) + u)
    _write_csv(os.path.join(out_dir, "raw_results.csv"), raw_header, raw_rows, digits)

    oc = operating_characteristics(results)
    x = config["recommend.x_percent"]
    summary_header = ["row", "stop"] + labels
    summary_rows = [
        ["pct_mtd", oc.stop_pct] + list(oc.mtd_pct),
        [f"pct_mgd_{x:g}pct", ""] + list(oc.mgd_pct),
        [f"pct_od_{x:g}pct", ""] + list(oc.od_pct),
        ["mean_patients", ""] + list(oc.mean_patients),
    ]
    _write_csv(os.path.join(out_dir, "summary.csv"), summary_header, summary_rows, digits)

    _write_scenario_truth(scenario, config, os.path.join(out_dir, "scenario_truth.csv"),
                          os.path.join(out_dir, "exposure_quantiles.csv"), digits)

    print(f"{design} x {oc.n_replicates} replicates on scenario {{{scenario.label}}}")
    print(f"stop%: {_fmt(oc.stop_pct, digits)}   fit failures: {oc.fit_failures}")
    for name, values in (("MTD%", oc.mtd_pct), (f"MGD-{x:g}%%".replace("%%", "%"), oc.mgd_pct),
                         (f"OD-{x:g}%", oc.od_pct), ("patients", oc.mean_patients)):
        cells = "  ".join(f"{lab}={_fmt(v, digits)}" for lab, v in zip(labels, values))
        print(f"{name:>10s}: {cells}")
    print(f"outputs in {out_dir}/")
    return EXIT_OK


def _write_scenario_truth(scenario, config, truth_path, quantile_path, digits):
    from scipy.stats import norm as _norm

    from .recommend import gain_vec

    grid = np.linspace(1.0, 60.0, 120)
    p_true = _norm.sf(np.log(scenario.tox.tau / grid) / scenario.tox.omega_kappa)
    r_true = scenario.pdy.mean(grid)
    s_true = scenario.eff.mean(grid)
    q_true = _norm.sf((config["recommend.threshold_c"] - r_true) / scenario.pdy.noise_sd)
    g = gain_vec(p_true, q_true, s_true, config.gain_params())
    rows = [[z, p, q, s, r, gg] for z, p, q, s, r, gg in
            zip(grid, p_true, q_true, s_true, r_true, g)]
    _write_csv(truth_path, ["exposure", "p_dlt", "q_engagement", "s_efficacy",
                            "r_mean", "gain"], rows, digits)

    from .pk import PopPKFit, sample_population_exposure, ExposureKind

    fit = PopPKFit(population=scenario.pk, individual_estimates={}, log_likelihood=0.0)
    qs = (10, 25, 50, 75, 90)
    rows = []
    for regimen in scenario.regimens:
        draws = sample_population_exposure(fit, regimen, ExposureKind.AUC24,
                                           4001, seed=config["seed"])
        rows.append([regimen.label, "auc24"] + [np.percentile(draws, q) for q in qs])
    _write_csv(quantile_path, ["regimen", "metric"] + [f"q{q}" for q in qs], rows, digits)


def _read_csv_table(path, required):
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(required) - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing columns {sorted(missing)}")
        return list(reader)


def _parse_regimen_file(path) -> dict[str, DoseRegimen]:
    raw = read_flat_config(path)
    labels = []
    for key in raw:
        parts = key.split(".")
        if len(parts) != 3 or parts[0] != "regimen":
            raise ConfigError(f"unexpected key {key!r} in regimen file")
        if parts[1] not in labels:
            labels.append(parts[1])
    regimens = {}
    for label in labels:
        fields = {k.split(".")[2]: v for k, v in raw.items()
                  if k.startswith(f"regimen.{label}.")}
        if "times_h" in fields:
            times = [float(v) for v in fields["times_h"].replace(",", " ").split()]
            doses = [float(v) for v in fields["doses_mg"].replace(",", " ").split()]
            if len(times) != len(doses):
                raise ConfigError(f"regimen {label}: times and doses differ in length")
            admins = tuple(zip(doses, times))
        else:
            dose = float(fields["dose_mg"])
            interval = float(fields.get("interval_h", 24.0))
            count = int(fields.get("n_administrations", 28))
            admins = tuple((dose, interval * i) for i in range(count))
        regimens[label] = DoseRegimen(admins, label=label)
    return regimens


def _cmd_recommend(args) -> int:
    config = _load_config(args)
    digits = config["print.digits"]
    for key in ("data.concentrations", "data.outcomes", "data.regimens"):
        if not config[key]:
            raise ConfigError(f"recommend needs {key} (flag or config)", field=key)

    regimens = _parse_regimen_file(config["data.regimens"])
    conc_rows = _read_csv_table(config["data.concentrations"],
                                ["patient_id", "time_h", "concentration", "regimen_label"])
    out_rows = _read_csv_table(config["data.outcomes"],
                               ["patient_id", "dlt", "pdy", "efficacy", "regimen_label"])

    from .pk import ConcentrationSample

    data, patient_regimens = {}, {}
    for row in conc_rows:
        pid = row["patient_id"]
        label = row["regimen_label"]
        if label not in regimens:
            raise ConfigError(f"unknown regimen label {label!r} in concentration file")
        data.setdefault(pid, []).append(ConcentrationSample(
            pid, float(row["time_h"]), float(row["concentration"])))
        patient_regimens[pid] = regimens[label]
    for pid, row in ((r["patient_id"], r) for r in out_rows):
        if pid not in data:
            raise ConfigError(f"outcome row for {pid!r} has no concentrations")
        if "n_administrations" in row and row.get("n_administrations"):
            patient_regimens[pid] = patient_regimens[pid].truncated(
                int(row["n_administrations"]))

    seed = config["seed"]
    rng = np.random.default_rng(seed)
    saem = SaemConfig(n_burnin=config["pk_fit.n_burnin"],
                      n_smoothing=config["pk_fit.n_smoothing"],
                      convergence_rtol=config["pk_fit.convergence_rtol"], seed=seed)
    pk_fit = fit_poppk(data, patient_regimens, config.pk_init(), saem)

    from .design import _estimated_exposure

    ordered = [row["patient_id"] for row in out_rows]
    z_est = np.array([_estimated_exposure(pk_fit.individual_estimates[pid],
                                          patient_regimens[pid]) for pid in ordered])
    w = np.array([int(row["dlt"]) for row in out_rows])
    r = np.array([float(row["pdy"]) for row in out_rows])
    s = np.array([float(row["efficacy"]) for row in out_rows])

    z_ref = config["recommend.z_ref"]
    candidates = list(regimens.values())
    anchors = [float(np.median(pk_fit.sample_exposures(
        reg, config.metric_map()["safety"], 2001, seed=seed + 7 + i)))
        for i, reg in enumerate((candidates[0], candidates[-1]))]
    mu_s, cov_s = calibrate_logistic_prior(anchors[0], anchors[1], z_ref,
                                           config["gain.delta_min"],
                                           config["gain.delta_max"])
    chains, warmup, draws = config.sampler_budget()
    common = dict(n_chains=chains, n_warmup=warmup, n_draws=draws,
                  strict_diagnostics=False)
    safety = SafetyModel(z_ref=z_ref, prior_mean=mu_s, prior_cov=cov_s,
                         **common).fit(z_est, w, seed=seed + 11)
    pdy = PdyModel(z_ref=z_ref, threshold_c=config["recommend.threshold_c"],
                   **common).fit(z_est, r, seed=seed + 13)
    efficacy = EfficacyModel(z_ref=z_ref, **common).fit(z_est, s, seed=seed + 17)

    ebd = endpoint_by_dose(pk_fit, safety, pdy, efficacy, candidates,
                           metric_map=config.metric_map(),
                           m_draws=min(config["recommend.m_draws"], chains * draws),
                           k_draws=config["recommend.k_draws"], seed=seed + 19,
                           threshold_c=config["recommend.threshold_c"])
    rec = recommend(ebd, config.gain_params(), config["recommend.x_percent"])

    header = ["regimen", "mean_p", "mean_q", "mean_s", "gain", "rg", "u", "flags"]
    rows = list(rec.table_rows())
    print("  ".join(header))
    for row in rows:
        print("  ".join(cell if isinstance(cell, str) else _fmt(cell, digits)
                        for cell in row))
    if rec.none_mass:
        print(f"inadmissible-draw mass: {_fmt(rec.none_mass, digits)}")
    out_dir = config["out"]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _write_csv(os.path.join(out_dir, "recommendation.csv"), header, rows, digits)
    return EXIT_OK


def _cmd_escalate(args) -> int:
    config = _load_config(args)
    digits = config["print.digits"]
    rows = _read_csv_table(args.state, ["dose_mg", "n_treated", "n_dlt"])
    doses = tuple(float(r["dose_mg"]) for r in rows)
    spec = EscalationSpec(
        doses=doses, d_ref=config["escalation.d_ref"],
        delta_min=config["gain.delta_min"], delta_max=config["gain.delta_max"],
        ewoc=config["escalation.ewoc"], cohort_size=config["escalation.cohort_size"],
        max_n=10**6, accuracy_threshold=config["escalation.accuracy_threshold"],
        accuracy_cohorts=config["escalation.accuracy_cohorts"],
        selection=config["escalation.selection"])
    state = EscalationState(
        n_doses=len(doses),
        n_treated=np.array([int(r["n_treated"]) for r in rows]),
        n_dlt=np.array([int(r["n_dlt"]) for r in rows]))
    prior = (calibrate_prior(spec) if config["escalation.prior"] == "calibrated"
             else default_prior())
    seed = args.seed if args.seed is not None else config["seed"]
    chains, warmup, draws = config.sampler_budget()
    draws_post = fit_blrm_dose(state, prior, spec,
                               SamplerConfig(n_chains=chains, n_warmup=warmup,
                                             n_draws=draws, seed=seed))
    decision = next_dose(state, draws_post, spec)

    from .escalation import dose_toxicity_draws

    p = dose_toxicity_draws(draws_post, spec)
    print("dose_mg  n  dlt  mean_p  pr_overdose  pr_target  admissible")
    for j, dose in enumerate(doses):
        print("  ".join([
            _fmt(dose, digits), str(int(state.n_treated[j])), str(int(state.n_dlt[j])),
            _fmt(float(p[:, j].mean()), digits),
            _fmt(float(decision.overdose_prob[j]), digits),
            _fmt(float(decision.interval_prob[j]), digits),
            "yes" if j in decision.admissible else "no"]))
    if decision.action == "treat":
        print(f"decision: treat next cohort at dose {doses[decision.dose]:g} mg "
              f"(level {decision.dose + 1})")
    else:
        mtd = "none" if decision.mtd is None else f"{doses[decision.mtd]:g} mg"
        print(f"decision: stop ({decision.reason}); MTD: {mtd}")
    return EXIT_OK


def run_cli(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return _cmd_simulate(args)
        if args.command == "recommend":
            return _cmd_recommend(args)
        if args.command == "escalate":
            return _cmd_escalate(args)
        if args.command == "defaults":
            sys.stdout.write(format_defaults())
            return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UdespeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_FAILURE


def main():
    sys.exit(run_cli())
