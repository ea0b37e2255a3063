"""Quality-aware optical/SAR fusion under missing modalities."""

from .cli import main
from .config import ExperimentConfig
from .dmqa import DmqaParams, FeatureMap, ReliabilityResult, TokenBank, dmqa_assess
from .errors import (
    ConfigError,
    ContractViolation,
    DegenerateInputError,
    DegenerateStepError,
    DivergenceError,
    FusionError,
    NonFiniteError,
    ProtocolBoundError,
)
from .graddiff import GradReport, ParamSet, fd_check, pipeline_backward, pipeline_forward, sgd_step
from .harness import evaluate, grad_check, run_cell, sweep, sweep_hparams, train
from .missing import AvailabilitySchedule, apply_missing, measured_mr, sample_availability
from .ocnf import FusionParams, OrthoProjector, init_projector, ocnf_fuse

__version__ = "0.1.1"

__all__ = [
    'main',
    'ExperimentConfig',
    'FeatureMap', 'TokenBank', 'DmqaParams', 'ReliabilityResult', 'dmqa_assess',
    'OrthoProjector', 'FusionParams', 'init_projector', 'ocnf_fuse',
    'AvailabilitySchedule', 'sample_availability', 'measured_mr', 'apply_missing',
    'ParamSet', 'GradReport', 'pipeline_forward', 'pipeline_backward', 'fd_check', 'sgd_step',
    'train', 'evaluate', 'run_cell', 'sweep', 'sweep_hparams', 'grad_check',
    'FusionError', 'ContractViolation', 'DegenerateInputError', 'DegenerateStepError',
    'ProtocolBoundError', 'NonFiniteError', 'DivergenceError', 'ConfigError',
]
