"""Configuration dataclasses, loading and digests.

Run configurations are YAML (or JSON) documents merged over the structured
`ExperimentConfig` schema with omegaconf, so a misspelled key fails loudly
instead of silently falling back to a default.
"""

from dataclasses import asdict, dataclass, field, replace
import hashlib
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from .errors import ConfigurationError

logger = logging.getLogger(__name__)

ALGORITHMS = ("one_shot", "iterative", "admm")
REGIMES = ("pretrain", "ticket", "reinit", "rewind", "finetune")
DATA_KINDS = ("blobs", "spirals", "idx")
LAYER_TYPES = ("dense", "conv2d", "relu", "flatten")

# Defaults of the 150-epoch CIFAR protocol; desk configs override epochs and milestones.
DEFAULT_EPOCHS = 150
DEFAULT_MILESTONES = [80, 120]


@dataclass
class AugmentConfig:
    horizontal_flip: bool = False
    # 0 disables random cropping; image configs use 2
    crop_padding: int = 0

    @property
    def enabled(self) -> bool:
        return self.horizontal_flip or self.crop_padding > 0


@dataclass
class TrainConfig:
    """Hyperparameters of one training process (pretraining, sparse training or fine-tuning).

    `epochs` is T (or T′ for fine-tuning). The learning rate starts at `lr0` and is multiplied by
    `decay_factor` at every epoch listed in `milestones`.
    """

    epochs: int = DEFAULT_EPOCHS
    lr0: float = 0.1
    milestones: List[int] = field(default_factory=lambda: list(DEFAULT_MILESTONES))
    decay_factor: float = 0.1
    momentum: float = 0.9
    # L2 coefficient: every step uses g + weight_decay·w
    weight_decay: float = 0.0
    batch_size: int = 128
    # data order; augmentation draws from `augment_seed` when set
    seed: int = 0
    augment_seed: Optional[int] = None
    rewind_epoch: Optional[int] = None
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    log_epoch_accuracy: bool = False


@dataclass
class AdmmConfig:
    rho: float = 1e-2
    outer_iters: int = 5
    # None -> epochs // 5 of the train config
    inner_epochs: Optional[int] = None
    # None -> lr0 * decay_factor of the train config
    lr: Optional[float] = None
    # None -> batch_size of the train config; at least the dataset size gives full-batch steps
    inner_batch_size: Optional[int] = None


@dataclass
class PruneConfig:
    algorithm: str = "iterative"
    target_sparsity: float = 0.5
    rounds: int = 1
    # None -> the full T epochs per iterative round
    round_epochs: Optional[int] = None
    admm: AdmmConfig = field(default_factory=AdmmConfig)
    exempt_first: bool = True


@dataclass
class LayerConfig:
    type: str = "dense"
    in_features: Optional[int] = None
    out_features: Optional[int] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    kernel_size: Optional[int] = None
    stride: int = 1
    bias: bool = True


@dataclass
class ModelConfig:
    input_shape: List[int] = field(default_factory=lambda: [2])
    class_count: int = 2
    layers: List[LayerConfig] = field(default_factory=list)


@dataclass
class DataConfig:
    kind: str = "spirals"
    n: int = 1000
    classes: int = 2
    dim: int = 2
    spread: float = 1.0
    turns: float = 1.5
    noise: float = 0.05
    seed: int = 0
    images_path: Optional[str] = None
    labels_path: Optional[str] = None
    # separate held-out IDX files; when absent the data is split
    test_images_path: Optional[str] = None
    test_labels_path: Optional[str] = None
    test_fraction: float = 0.2
    split_seed: int = 2020


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    regimes: List[str] = field(default_factory=lambda: ["ticket", "reinit", "finetune"])
    # mask algorithms to compare; empty -> [prune.algorithm]
    algorithms: List[str] = field(default_factory=list)
    # initial learning rates to sweep; empty -> [train.lr0]
    learning_rates: List[float] = field(default_factory=list)
    sparsity_grid: List[float] = field(default_factory=lambda: [0.5])
    p_grid: List[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    sparse_p: float = 0.2
    seeds: List[int] = field(default_factory=lambda: [0])
    epsilon: float = 0.5
    delta: float = 0.5
    null_trials: int = 1000
    precision: str = "f32"
    save_checkpoints: bool = True
    output_dir: str = "results"
    workers: int = 1


# keys that do not change any computed number
_DIGEST_EXCLUDED = ("output_dir", "workers")


def validate_train_config(config: TrainConfig) -> None:
    if config.epochs < 0:
        raise ConfigurationError(f"epochs must be non-negative, got {config.epochs}")
    if config.lr0 <= 0:
        raise ConfigurationError(f"lr0 must be positive, got {config.lr0}")
    milestones = list(config.milestones)
    if any(b <= a for a, b in zip(milestones, milestones[1:])):
        raise ConfigurationError(f"milestones must be strictly increasing, got {milestones}")
    if milestones and config.epochs > 0 and milestones[-1] >= config.epochs:
        raise ConfigurationError(f"milestones must be < epochs ({config.epochs}), got {milestones}")
    if milestones and milestones[0] < 0:
        raise ConfigurationError(f"milestones must be non-negative, got {milestones}")
    if not 0 < config.decay_factor < 1:
        raise ConfigurationError(f"decay_factor must be in (0, 1), got {config.decay_factor}")
    if not 0 <= config.momentum < 1:
        raise ConfigurationError(f"momentum must be in [0, 1), got {config.momentum}")
    if config.weight_decay < 0:
        raise ConfigurationError(f"weight_decay must be non-negative, got {config.weight_decay}")
    if config.batch_size < 1:
        raise ConfigurationError(f"batch_size must be positive, got {config.batch_size}")
    if config.rewind_epoch is not None and not 0 <= config.rewind_epoch < max(config.epochs, 1):
        raise ConfigurationError(f"rewind_epoch must be in [0, epochs), got {config.rewind_epoch}")
    if config.augment.crop_padding < 0:
        raise ConfigurationError(f"crop_padding must be non-negative, got {config.augment.crop_padding}")


def validate_prune_config(config: PruneConfig) -> None:
    if config.algorithm not in ALGORITHMS:
        raise ConfigurationError(f"Unknown pruning algorithm: {config.algorithm}. Expected one of {ALGORITHMS}.")
    if not 0 <= config.target_sparsity < 1:
        raise ConfigurationError(f"target_sparsity must be in [0, 1), got {config.target_sparsity}")
    if config.rounds < 1:
        raise ConfigurationError(f"rounds must be >= 1, got {config.rounds}")
    if config.round_epochs is not None and config.round_epochs < 0:
        raise ConfigurationError(f"round_epochs must be non-negative, got {config.round_epochs}")
    admm = config.admm
    if admm.rho <= 0:
        raise ConfigurationError(f"admm.rho must be positive, got {admm.rho}")
    if admm.outer_iters < 1:
        raise ConfigurationError(f"admm.outer_iters must be >= 1, got {admm.outer_iters}")
    if admm.inner_epochs is not None and admm.inner_epochs < 0:
        raise ConfigurationError(f"admm.inner_epochs must be non-negative, got {admm.inner_epochs}")
    if admm.lr is not None and admm.lr <= 0:
        raise ConfigurationError(f"admm.lr must be positive, got {admm.lr}")
    if admm.inner_batch_size is not None and admm.inner_batch_size < 1:
        raise ConfigurationError(f"admm.inner_batch_size must be positive, got {admm.inner_batch_size}")


def validate_experiment_config(config: ExperimentConfig) -> None:
    validate_train_config(config.train)
    validate_prune_config(config.prune)
    for algorithm in config.algorithms:
        if algorithm not in ALGORITHMS:
            raise ConfigurationError(f"Unknown pruning algorithm: {algorithm}. Expected one of {ALGORITHMS}.")
    for regime in config.regimes:
        if regime not in REGIMES:
            raise ConfigurationError(f"Unknown regime: {regime}. Expected one of {REGIMES}.")
    if "rewind" in config.regimes and config.train.rewind_epoch is None:
        raise ConfigurationError("the rewind regime needs train.rewind_epoch")
    if config.data.kind not in DATA_KINDS:
        raise ConfigurationError(f"Unknown dataset kind: {config.data.kind}. Expected one of {DATA_KINDS}.")
    if not config.seeds:
        raise ConfigurationError("seeds must not be empty")
    if len(set(config.seeds)) != len(config.seeds):
        raise ConfigurationError(f"seeds must be distinct, got {config.seeds}")
    if not config.sparsity_grid:
        raise ConfigurationError("sparsity_grid must not be empty")
    for s in config.sparsity_grid:
        if not 0 <= s < 1:
            raise ConfigurationError(f"sparsity values must be in [0, 1), got {s}")
    for p in list(config.p_grid) + [config.sparse_p]:
        if not 0 < p <= 1:
            raise ConfigurationError(f"p values must be in (0, 1], got {p}")
    for lr in config.learning_rates:
        if lr <= 0:
            raise ConfigurationError(f"learning rates must be positive, got {lr}")
    if not 0 < config.data.test_fraction < 1:
        raise ConfigurationError(f"data.test_fraction must be in (0, 1), got {config.data.test_fraction}")
    if config.precision not in ("f32", "f64"):
        raise ConfigurationError(f"precision must be f32 or f64, got {config.precision}")
    if config.workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {config.workers}")
    if config.null_trials < 1:
        raise ConfigurationError(f"null_trials must be >= 1, got {config.null_trials}")


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load, merge and validate an experiment configuration.

    Args:
        path: YAML or JSON document.
        overrides (Sequence[str]): Dotted `key=value` overrides, e.g. `train.lr0=0.01`.

    Returns:
        A validated `ExperimentConfig`.
    """
    path = Path(path)
    try:
        schema = OmegaConf.structured(ExperimentConfig)
        merged = OmegaConf.merge(schema, OmegaConf.load(path), OmegaConf.from_dotlist(list(overrides)))
        config = OmegaConf.to_object(merged)
    except FileNotFoundError:
        raise
    except (OmegaConfBaseException, ValueError, TypeError) as e:
        raise ConfigurationError(f"{path}: {e}") from e
    validate_experiment_config(config)
    logger.debug("loaded config from %s", path)
    return config


def config_to_dict(config) -> dict:
    return asdict(config)


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def digest(payload) -> str:
    """SHA-256 hex digest of the canonical JSON form of `payload`."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def config_digest(config: ExperimentConfig) -> str:
    payload = {k: v for k, v in config_to_dict(config).items() if k not in _DIGEST_EXCLUDED}
    return digest(payload)


def with_lr(config: TrainConfig, lr0: float) -> TrainConfig:
    return replace(config, lr0=lr0)
