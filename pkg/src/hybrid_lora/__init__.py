"""Hybrid full/low-rank fine-tuning on a desk-scale transformer."""

from .allocator import AllocationPlan, allocate, allocate_from_full, validate_plan
from .lora import AdapterSet, LoraBranch, adapted_forward, attach_lora, merge_branch, set_masks
from .model import KINDS, ModelConfig, ModuleId, build_model
from .scoring import (HybridScoreReport, alpha_importance, batch_sensitivity, hybrid_score,
                      perturbation_score, random_partition, score_modules)
from .tasks import VerifiableTask, reward
from .trainer import GrpoConfig, TrainConfig, compute_advantages, grpo_loss, hybrid_train

__version__ = "0.1.0"
