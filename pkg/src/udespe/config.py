"""Run configuration: flat dotted-key text files with validated defaults.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Every key has a documented default matching the simulation-study settings,
so an empty file is a complete configuration.
"""

from __future__ import annotations

import difflib
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .pk import ExposureKind


def read_flat_config(path: str) -> dict[str, str]:
    """Parse ``key = value`` lines; later keys override earlier ones."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_float(raw, lo=None, hi=None):
    try:
        value = float(raw)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {raw!r}") from exc
    if lo is not None and value < lo:
        raise ConfigError(f"value {value} below minimum {lo}")
    if hi is not None and value > hi:
        raise ConfigError(f"value {value} above maximum {hi}")
    return value


def _parse_int(raw, lo=None):
    try:
        value = int(raw)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}") from exc
    if lo is not None and value < lo:
        raise ConfigError(f"value {value} below minimum {lo}")
    return value


def _parse_choice(raw, choices):
    if raw not in choices:
        raise ConfigError(f"expected one of {sorted(choices)}, got {raw!r}")
    return raw


def _parse_floats(raw):
    return tuple(_parse_float(v) for v in raw.replace(",", " ").split())


# key -> (default, parser, help); the defaults reproduce the simulation
# study: gain (2, 1, -4, 0.20, 0.33), z_ref 40, engagement threshold 0.5,
# x = 1%, six once-daily regimens at (10, 15, 25, 35, 50, 70) mg
SCHEMA: dict[str, tuple] = {
    "scenario": ("2,1,1", str, "scenario label like 2,1,1 or a path to a scenario file"),
    "design": ("two-step", lambda r: _parse_choice(r, {"one-step", "two-step", "multi-step"}),
               "trial design"),
    "alloc_mode": ("all", lambda r: _parse_choice(r, {"all", "top-two"}),
                   "optimization-stage allocation mode"),
    "replicates": (500, lambda r: _parse_int(r, 1), "number of simulated trials"),
    "seed": (1, lambda r: _parse_int(r, 0), "master seed"),
    "threads": (0, lambda r: _parse_int(r, 0), "worker processes (0 = all cores)"),
    "out": ("udespe-out", str, "output directory"),
    "budget.n_escalation": (24, lambda r: _parse_int(r, 3), "escalation-stage patients"),
    "budget.n_optimization": (18, lambda r: _parse_int(r, 0), "optimization-stage patients"),
    "gain.alpha1": (2.0, lambda r: _parse_float(r, 0.0), "efficacy weight"),
    "gain.alpha2": (1.0, lambda r: _parse_float(r, 0.0), "engagement weight"),
    "gain.alpha3": (-4.0, lambda r: _parse_float(r, None, 0.0), "toxicity weight (<= 0)"),
    "gain.delta_min": (0.20, lambda r: _parse_float(r, 0.0, 1.0), "lower toxicity bound"),
    "gain.delta_max": (0.33, lambda r: _parse_float(r, 0.0, 1.0), "upper toxicity bound"),
    "recommend.x_percent": (1.0, lambda r: _parse_float(r, 0.0), "relative-gain tolerance (%)"),
    "recommend.z_ref": (40.0, lambda r: _parse_float(r, 1e-12), "reference exposure"),
    "recommend.threshold_c": (0.5, lambda r: _parse_float(r, 0.0, 1.0),
                              "engagement threshold on the reduction scale"),
    "recommend.m_draws": (1000, lambda r: _parse_int(r, 1), "posterior draws marginalized"),
    "recommend.k_draws": (80, lambda r: _parse_int(r, 1), "exposure draws per posterior draw"),
    "metric.safety": ("auc24", lambda r: _parse_choice(r, {k.value for k in ExposureKind}),
                      "exposure metric for the safety model"),
    "metric.pdy": ("auc24", lambda r: _parse_choice(r, {k.value for k in ExposureKind}),
                   "exposure metric for the activity model"),
    "metric.efficacy": ("auc24", lambda r: _parse_choice(r, {k.value for k in ExposureKind}),
                        "exposure metric for the efficacy model"),
    "sampler.n_chains": (4, lambda r: _parse_int(r, 1), "MCMC chains per fit"),
    "sampler.n_warmup": (1000, lambda r: _parse_int(r, 1), "warmup iterations per chain"),
    "sampler.n_draws": (1000, lambda r: _parse_int(r, 1), "kept draws per chain"),
    "escalation.d_ref": (50.0, lambda r: _parse_float(r, 1e-12), "reference dose (mg)"),
    "escalation.ewoc": (0.25, lambda r: _parse_float(r, 0.0, 1.0), "overdose-control cap"),
    "escalation.cohort_size": (3, lambda r: _parse_int(r, 1), "patients per cohort"),
    "escalation.accuracy_threshold": (0.60, lambda r: _parse_float(r, 0.0, 1.0),
                                      "targeting probability needed to stop for accuracy"),
    "escalation.accuracy_cohorts": (3, lambda r: _parse_int(r, 1),
                                    "consecutive cohorts required for accuracy stop"),
    "escalation.selection": ("interval", lambda r: _parse_choice(r, {"interval", "highest"}),
                             "dose-selection rule among admissible doses"),
    "escalation.prior": ("default", lambda r: _parse_choice(r, {"default", "calibrated"}),
                         "escalation prior: reactive default or quantile-calibrated"),
    "safety.prior": ("default", lambda r: _parse_choice(r, {"default", "calibrated"}),
                     "exposure-safety prior: reactive default or quantile-calibrated"),
    "pk_fit.n_burnin": (300, lambda r: _parse_int(r, 10), "SAEM burn-in iterations"),
    "pk_fit.n_smoothing": (100, lambda r: _parse_int(r, 10), "SAEM smoothing iterations"),
    "pk_fit.convergence_rtol": (1e-3, lambda r: _parse_float(r, 0.0),
                                "max per-iteration relative drift accepted at the end"),
    "pk_init.ka": (1.0, lambda r: _parse_float(r, 1e-9), "initial absorption rate (1/h)"),
    "pk_init.cl": (1.5, lambda r: _parse_float(r, 1e-9), "initial clearance (L/h)"),
    "pk_init.v": (80.0, lambda r: _parse_float(r, 1e-9), "initial volume (L)"),
    "pk_init.omega_ka_sq": (0.1, lambda r: _parse_float(r, 0.0), "initial IIV on ka"),
    "pk_init.omega_cl_sq": (0.1, lambda r: _parse_float(r, 0.0), "initial IIV on CL"),
    "pk_init.prop_error_sd": (0.15, lambda r: _parse_float(r, 1e-9), "initial residual sd"),
    "print.digits": (4, lambda r: _parse_int(r, 1), "significant digits in tables"),
    "data.concentrations": ("", str, "concentration CSV for the recommend command"),
    "data.outcomes": ("", str, "outcome CSV for the recommend command"),
    "data.regimens": ("", str, "regimen definition file for the recommend command"),
}


@dataclass
class RunConfig:
    """Validated configuration with every schema key resolved."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def gain_params(self):
        from .recommend import GainParams

        return GainParams(self["gain.alpha1"], self["gain.alpha2"], self["gain.alpha3"],
                          self["gain.delta_min"], self["gain.delta_max"])

    def sampler_budget(self):
        return (self["sampler.n_chains"], self["sampler.n_warmup"], self["sampler.n_draws"])

    def metric_map(self):
        return {name: ExposureKind(self[f"metric.{name}"])
                for name in ("safety", "pdy", "efficacy")}

    def pk_init(self):
        from .pk import PopPKParams

        return PopPKParams(self["pk_init.ka"], self["pk_init.cl"], self["pk_init.v"],
                           self["pk_init.omega_ka_sq"], self["pk_init.omega_cl_sq"],
                           self["pk_init.prop_error_sd"])


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Load, validate, and default-fill a configuration.

    Unknown keys are rejected with the closest valid key named; invalid
    values are rejected with the expected range and the default.
    """
    raw = read_flat_config(path) if path else {}
    raw.update(overrides or {})
    values = {key: default for key, (default, _, _) in SCHEMA.items()}
    for key, text in raw.items():
        if key not in SCHEMA:
            close = difflib.get_close_matches(key, SCHEMA.keys(), n=1)
            hint = f"; did you mean {close[0]!r}?" if close else ""
            raise ConfigError(f"unknown config key {key!r}{hint}", field=key)
        default, parser, help_text = SCHEMA[key]
        try:
            values[key] = parser(text)
        except ConfigError as exc:
            raise ConfigError(f"invalid value for {key} ({help_text}; default "
                              f"{default}): {exc}", field=key) from exc
    if values["gain.delta_min"] >= values["gain.delta_max"]:
        raise ConfigError("gain.delta_min must be below gain.delta_max",
                          field="gain.delta_min")
    for key in ("data.concentrations", "data.outcomes", "data.regimens"):
        if values[key] and not os.path.exists(values[key]):
            raise ConfigError(f"{key} points to a missing file: {values[key]}", field=key)
    return RunConfig(values=values)


def format_defaults() -> str:
    """The full schema with defaults, printable via the CLI."""
    lines = []
    for key, (default, _, help_text) in SCHEMA.items():
        lines.append(f"{key} = {default}  # {help_text}")
    return "\n".join(lines) + "\n"
