"""Token-adaptive knowledge distillation on a synthetic seq2seq task.

Tiny from-scratch transformers (teacher and student), a family of
distillation losses that classify tokens by difficulty and mix prior
knowledge into the student distribution for the hard ones, and a CLI for
running the bundled experiments end to end on a CPU.
"""

__version__ = "0.1.0"

from .errors import InvalidInputError, TrainingDiverged
from .kd_losses import ALL_STRATEGIES, DISTILL_STRATEGIES, DistillConfig
from .seq_model import ModelConfig, ModelParams, load_checkpoint, save_checkpoint
from .synth_task import TaskSpec, generate_corpus
from .trainer import TrainConfig, distill, evaluate, train_sft

__all__ = [
    "ALL_STRATEGIES",
    "DISTILL_STRATEGIES",
    "DistillConfig",
    "InvalidInputError",
    "ModelConfig",
    "ModelParams",
    "TaskSpec",
    "TrainConfig",
    "TrainingDiverged",
    "__version__",
    "distill",
    "evaluate",
    "generate_corpus",
    "load_checkpoint",
    "save_checkpoint",
    "train_sft",
]
