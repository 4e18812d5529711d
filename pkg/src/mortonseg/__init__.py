"""Morton-ordered bidirectional state-space segmentation, on numpy.

A small, dependency-light implementation of a volumetric segmentation
network whose long-range layers run selective state-space scans over
Z-order (Morton) voxel sequences, with EMA vector quantization at the
bottleneck, plus the surrounding study tooling: phantom synthesis,
fiv-stratified folds, Dice/HD95 scoring, result binning and an analytic
FLOP cost model.
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .folds import FoldAssignment, build_systematic_folds
from .gradcheck import GradCheckResult, check_gradients
from .metrics import evaluate_case, hd95
from .metrics import dice as dice_score
from .morton import (MortonPermutation, build_permutation, morton_code,
                     morton_decode)
from .network import (Model, NetConfig, ce_dice_loss, desk_config,
                      full_config, sliding_window_infer)
from .phantom import (CaseRecord, generate_phantom, load_dataset,
                      normalize_modalities, save_case)
from .rng import make_rng
from .ssm import bidir_scan_block, gated_fusion, init_ssm_params, selective_scan
from .tensor import NumericalError, Tensor, no_grad
from .train import AdamW, train
from .vq import Codebook, ema_update, make_codebook, quantize

__version__ = "0.1.0"

__all__ = [
    "AdamW", "CaseRecord", "Codebook", "FoldAssignment", "GradCheckResult",
    "Model", "MortonPermutation", "NetConfig", "NumericalError", "Tensor",
    "__version__", "bidir_scan_block", "build_permutation",
    "build_systematic_folds", "ce_dice_loss", "check_gradients",
    "desk_config", "dice_score", "ema_update", "evaluate_case",
    "full_config", "generate_phantom", "gated_fusion", "hd95",
    "init_ssm_params", "load_checkpoint", "load_dataset", "make_codebook",
    "make_rng", "morton_code", "morton_decode", "no_grad",
    "normalize_modalities", "quantize", "save_case", "save_checkpoint",
    "selective_scan", "sliding_window_infer", "train",
]
