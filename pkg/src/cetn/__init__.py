"""CETN click-through-rate models (CETN, simMHN and ablations) on a numpy
reverse-mode differentiation core."""
from .autodiff import Tape, Var, backward, grad_check
from .config import ExperimentConfig, load_config
from .data import ConfigurationError, DatasetSchema, EncodedDataset, PreparedData, SplitSpec
from .losses import LossWeights, total_loss
from .metrics import Metrics, auc, logloss, relaimpr
from .model import CETN, ModelConfig, NumericError
from .trainer import TrainResult, evaluate, train

__version__ = "0.1.0"
