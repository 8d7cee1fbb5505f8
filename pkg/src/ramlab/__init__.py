"""Attention-robustness lab: MAS / RAD attention refinements, patch attacks and
receptive-field analysis on toy segmentation transformers."""

from .attacks import AttackResult, AttackSpec, attack_run
from .attention import AttentionConfig, AttentionTrace, mas_transform, max_bound_check, rad_apply
from .data import DatasetSpec, PatchMask, generate_dataset, make_patch_mask
from .kernels import BACKEND
from .metrics import MetricsReport, miou, pacc_masked
from .model import SegModel, SegModelConfig, load_checkpoint, model_forward, model_init, save_checkpoint
from .receptive import RfMap, rf_average, rf_effective_radius, rf_gradient_map
from .rng import RngState
from .targets import AttackTarget, permute_target, strip_target
from .tensor import Tape, Tensor, backward, finite_diff_check
from .train import TrainConfig, train

__version__ = "0.1.0"
