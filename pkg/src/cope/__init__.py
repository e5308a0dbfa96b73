"""Online continual learning with continually evolving class prototypes."""

from .agents import (
    CopeLearner,
    CrossEntropyLearner,
    EvaluatorConfig,
    LearnerConfig,
    RunResult,
    evaluate,
    run_baseline_learner,
    run_cope_learner,
    run_experiment,
)
from .embed_net import EmbeddingNetwork, NetConfig
from .ppp_loss import LabeledFeatures, LossConfig, ppp_loss
from .proto_memory import OperationalMemory
from .streams import Dataset, StreamSpec, build_stream, parse_idx, synth_gaussians

__version__ = "0.1.0"
