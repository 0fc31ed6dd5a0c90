"""Task-free online continual learning on synthetic non-i.i.d. streams."""
from .buffer import HardBuffer
from .controller import LossWindow, StabilityController
from .errors import ConfigError, EmptySamplesError, InputError, StreamFaultError
from .harness import RunConfig, MetricsLog, evaluate_classifier, evaluate_templates, export_csv, train_online
from .mas import ImportanceState, consolidate, estimate_raw_importance, output_sensitivity, penalty, penalty_grad
from .nn import LossSpec, Model, finite_diff_grad, forward, loss_and_grad, sgd_step

__version__ = "0.1.0"
