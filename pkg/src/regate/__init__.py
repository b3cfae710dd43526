"""Token gating for small transformers, guided by a frozen text-only teacher."""

__version__ = "0.1.0"

from .autodiff import NonFiniteError, Tensor  # noqa: E402
from .data import Role, SyntheticTaskConfig, TokenSequence, generate_dataset  # noqa: E402
from .gating import GateDecision, assemble_batch_mask, build_mask, candidate_indices  # noqa: E402
from .model import (  # noqa: E402
    ModelConfig,
    ModelParams,
    forward_dense,
    forward_sparse,
    init_params,
    sparse_decoder_layer,
    student_label_loss,
    teacher_ref_loss,
)
from .schedule import SparsitySchedule  # noqa: E402
from .scoring import DifficultyBuffer, RefLossCache, ScoreConfig, combined_score  # noqa: E402

__all__ = [
    "__version__",
    "NonFiniteError",
    "Tensor",
    "Role",
    "SyntheticTaskConfig",
    "TokenSequence",
    "generate_dataset",
    "GateDecision",
    "assemble_batch_mask",
    "build_mask",
    "candidate_indices",
    "ModelConfig",
    "ModelParams",
    "forward_dense",
    "forward_sparse",
    "init_params",
    "sparse_decoder_layer",
    "student_label_loss",
    "teacher_ref_loss",
    "SparsitySchedule",
    "DifficultyBuffer",
    "RefLossCache",
    "ScoreConfig",
    "combined_score",
]
