"""Desk-scale lottery-ticket experiments: masks, sparse-training regimes and weight correlation."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .correlation import correlation_indicator, correlation_report, null_band
from .datasets import Dataset, load_dataset
from .masking import Mask, apply_mask, sparsity
from .model import ModelSpec, ParamSet, accuracy, init_params
from .pruning import generate_mask
from .regimes import evaluate_winning_property, pretrain, prune_and_finetune, rewind_train, sparse_train
from .suite import run_regime_suite
