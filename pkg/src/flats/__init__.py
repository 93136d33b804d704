"""Desk-scale simulator of federated adversarial training (FLATS schedulers)."""

from .attacks import AttackConfig, AttackKind, fgsm, ffgsm, perturb_batch, square_attack
from .data import LabeledDataset, ManipulationSpec, PartitionPlan, TestDataType
from .errors import ConfigError, FlatsError, FormatError, InputError
from .federated import FedConfig, RoundRecord, ScheduleMethod, fedavg, run_experiment
from .nn import Architecture, Model, ParameterSet

__version__ = "0.1.0"
