"""Utility-based Bayesian dose-regimen optimization.

Fits a population PK model and three exposure-response models (safety,
pharmacodynamic activity, efficacy), marginalizes them to regimen-level
endpoint distributions, scores regimens with a gain function, and selects
the MGD-x% / OD-x% recommendations. Includes BLRM dose escalation with
overdose control and a replicated-trial simulation harness.
"""

from .config import RunConfig, format_defaults, parse_config
from .design import (EffectScenario, OperatingCharacteristics, ScenarioSpec,
                     ToxScenario, TrialResult, allocate_weighted, load_scenario,
                     operating_characteristics, run_batch, run_trial,
                     scenario_names, simulate_dlt_process, simulate_effect)
from .errors import (CalibrationError, ConfigError, EstimationError,
                     InvalidParameterError, NoAdmissibleRegimenError, SamplerError,
                     UdespeError)
from .escalation import (EscalationSpec, EscalationState, admissible_doses,
                         calibrate_prior, default_prior, escalation_review,
                         fit_blrm_dose, next_dose)
from .models import (EfficacyModel, PatientOutcome, PdyModel, SafetyModel,
                     calibrate_logistic_prior, prior_predictive_probs)
from .pk import (ConcentrationSample, DoseRegimen, ExposureKind, IndividualPK,
                 PopPKFit, PopPKParams, SaemConfig, auc_window, cmax,
                 concentration_at, ctrough, derive_exposure, fit_poppk,
                 sample_population_exposure, simulate_concentrations,
                 simulate_individuals)
from .recommend import (EndpointByDose, GainParams, Recommendation,
                        endpoint_by_dose, gain, mgd_x, od_x, recommend,
                        relative_gain, u_probs)
from .sampler import (ChainSet, LogDensityTarget, SamplerConfig, diagnostics,
                      sample_posterior)
from .splines import ISplineBasis, ispline_basis, knots_from_exposures, mspline_basis

__version__ = "0.1.0"
