"""Multiple-imputation estimation of treatment effects for adherers.

Estimates the adherer average causal effect (AdACE): the treatment
difference within principal strata defined by potential adherence to one or
both treatments.  Counterfactual trajectories are multiply imputed from
arm-specific regression models, stratum means are simple weighted averages
over the completed data, and uncertainty comes from a stratified bootstrap
with re-imputation or from Rubin-style pooling.  A seeded simulation
harness generates trials from a configurable data-generating model and
checks the pipeline against a brute-force Monte Carlo truth oracle.
"""

__version__ = "0.1.0"

from .estimators import (DIFFERENCE, E0, E0_UNION_E1, E1, EmptyStratumError,
                         StratumEstimate, StratumTriple, estimate, estimate_cell,
                         estimate_principal_score_comparator, parameter_name)
from .imputation import (BASELINE_ONLY, FULL, ImputationPlan, ImputedDataset,
                         LinearImputationModel, LogisticImputationModel,
                         draw_linear, draw_logistic, export_imputations_csv,
                         fit_linear, fit_logistic, impute_many, impute_once)
from .inference import (BootstrapResult, RubinResult, Target, bootstrap,
                        rubin_pool, within_variance, z_test)
from .simulation import (OracleTruth, SETTINGS, SettingConfig, StudyReport,
                         generate_trial, load_config, make_null, oracle_truth,
                         resolve_setting, run_study, save_config)
from .streams import derive_seed, stream
from .trial_data import (PotentialOutcomeFrame, StratumLabel, SubjectRecord,
                         TrialDataset, Violation, adherence, load_csv, save_csv,
                         validate)
