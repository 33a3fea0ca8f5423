"""Generalized patch-level forecasting with a latent-bottleneck encoder and a query decoder, on numpy."""
from .data import (DatasetBundle, MultivariateSeries, SynthSpec, chronological_split, load_csv, sine_suite_spec,
                   synth_generate, window_array, write_csv)
from .evaluation import (EvalReport, LastValuePredictor, evaluate_forecast, evaluate_imputation, export_attention,
                         metric_mae, metric_mse, parameter_census, profile_variants)
from .formulation import IndexPlan, make_patch_grid, revin_denormalize, revin_normalize, sample_plan, standard_plan
from .model import Forecaster, ModelConfig, forecast, forward, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"
