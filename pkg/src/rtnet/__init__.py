"""rtnet: a self-contained time-series forecasting engine.

Grouped residual pyramid backbone, pluggable normalization, a frozen cosine
relation matrix for multivariate mixing, decoupled calendar embedding, and
both supervised and two-stage contrastive training, plus diagnostics
(PACF, BIC, input-length sweeps) and a reproducible experiment harness.
"""

from .data import (SplitSpec, Standardizer, TimeSeriesDataset, WindowBatch,
                   gather_batch, load_csv, make_windows, split, standardize,
                   time_features)
from .diagnostics import PacfResult, SweepResult, input_length_sweep, metrics, pacf
from .errors import (ConfigError, ContractError, DataError, DimensionError,
                     NumericalError, RTNetError, SamplerError)
from .harness import ExperimentReport, ExperimentSpec, compare_formats, run_experiment
from .model import ModelConfig, RTNet, load_checkpoint, save_checkpoint
from .norm import (BatchNormParams, LayerNormParams, WeightNormParam, batch_norm,
                   layer_norm, weight_norm_effective)
from .optim import Adam, AdamState, adam_step
from .relation import (RelationMatrix, apply_relation, bic_score, cos_relation_matrix,
                       gaussian_log_likelihood, threshold_and_standardize)
from .tensor import GradTape, Tensor, backward
from .training import (AugmentSpec, ContrastiveBatch, TrainConfig, TrainResult,
                       augment, contrastive_loss, early_stop, evaluate,
                       make_contrastive_batch, mse_loss_vector,
                       sample_batch_condition1, train_contrastive, train_end_to_end)

__version__ = "0.1.0"
