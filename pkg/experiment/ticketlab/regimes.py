"""Pretraining, the lottery-ticket sparse-training regimes and pruning & fine-tuning.

All regimes share `train`: T epochs of momentum SGD under the step schedule,
with an optional fixed mask that is re-checked at every epoch boundary.
The data order depends only on `TrainConfig.seed` and the epoch, and augmentation
only on `TrainConfig.augment_seed` (default: the same seed) and the epoch, so two
calls that differ only in their start weights see identical batches.
"""

from dataclasses import dataclass, field, replace
import logging
from typing import Callable, Optional

from tqdm import tqdm

from .config import TrainConfig
from .datasets import Dataset, augment, batch_indices
from .errors import ConfigurationError, NumericFailure
from .masking import Mask, apply_mask, check_mask_invariant
from .model import ModelSpec, ParamSet, accuracy, loss_and_grads
from .optim import VelocityState, lr_at, sgd_step
from .rng import stream

logger = logging.getLogger(__name__)

REGIME_CODES = {"pretrain": 0, "ticket": 1, "reinit": 2, "rewind": 3, "finetune": 4}
START_SOURCES = {"pretrain": "theta0", "ticket": "theta0", "reinit": "theta0_prime", "rewind": "theta_k", "finetune": "theta_T"}

GradHook = Callable[[ParamSet, ParamSet], ParamSet]


@dataclass
class TrainResult:
    params: ParamSet
    snapshots: dict = field(default_factory=dict)
    losses: list = field(default_factory=list)
    velocity: Optional[VelocityState] = None


def train(
    model: ModelSpec,
    start: ParamSet,
    dataset: Dataset,
    config: TrainConfig,
    mask: Optional[Mask] = None,
    epochs: Optional[int] = None,
    snapshot_epochs=(),
    grad_hook: Optional[GradHook] = None,
    epoch_callback: Optional[Callable[[int, ParamSet], None]] = None,
    eval_dataset: Optional[Dataset] = None,
    progress: bool = False,
    velocity: Optional[VelocityState] = None,
) -> TrainResult:
    """Run `epochs` (default `config.epochs`) epochs of momentum SGD from `start`.

    Args:
        mask: Held fixed throughout; applied to `start` first and enforced by every step.
        snapshot_epochs: Numbers of completed epochs k at which to keep a copy θₖ
            (0 is the start itself).
        grad_hook: Called as `grad_hook(params, grads)`; returns the gradients to use.
        epoch_callback: Called as `epoch_callback(completed_epochs, params)` after each epoch.
        eval_dataset: Held-out data for per-epoch accuracy logging (`config.log_epoch_accuracy`).
        velocity: Momentum buffers to resume from; zeros when omitted.

    Raises:
        NumericFailure: with the epoch and batch index.
        MaskInvariantError: a masked coordinate became nonzero (never expected).
    """
    total = config.epochs if epochs is None else epochs
    params = apply_mask(start, mask) if mask is not None else start.copy()
    if velocity is None:
        velocity = VelocityState.zeros_like(params)
    augment_seed = config.seed if config.augment_seed is None else config.augment_seed
    snapshots = {}
    if 0 in snapshot_epochs:
        snapshots[0] = params.copy()
    losses = []
    for epoch in tqdm(range(total), desc="epochs", disable=not progress, leave=False):
        lr = lr_at(epoch, config)
        aug_rng = stream(augment_seed, "augment", epoch)
        epoch_loss = 0.0
        index_batches = batch_indices(len(dataset), config.batch_size, stream(config.seed, "shuffle", epoch))
        for b, idx in enumerate(index_batches):
            inputs = augment(dataset.inputs[idx], config.augment, aug_rng)
            loss, grads = loss_and_grads(model, params, inputs, dataset.labels[idx], epoch=epoch, batch_index=b)
            if grad_hook is not None:
                grads = grad_hook(params, grads)
            params, velocity = sgd_step(params, grads, velocity, lr, config.momentum, mask, config.weight_decay)
            epoch_loss += loss * len(idx)
        if not params.is_finite():
            raise NumericFailure("non-finite weights", epoch=epoch)
        if mask is not None:
            check_mask_invariant(params, mask, epoch)
        losses.append(epoch_loss / len(dataset))
        if config.log_epoch_accuracy and eval_dataset is not None:
            logger.info("epoch %d lr %.5g loss %.5f acc %.4f", epoch, lr, losses[-1], accuracy(model, params, eval_dataset))
        else:
            logger.debug("epoch %d lr %.5g loss %.5f", epoch, lr, losses[-1])
        if epoch + 1 in snapshot_epochs:
            snapshots[epoch + 1] = params.copy()
        if epoch_callback is not None:
            epoch_callback(epoch + 1, params)
    return TrainResult(params, snapshots, losses, velocity)


def pretrain(
    model: ModelSpec,
    theta_0: ParamSet,
    dataset: Dataset,
    config: TrainConfig,
    eval_dataset: Optional[Dataset] = None,
    progress: bool = False,
) -> tuple[ParamSet, dict]:
    """Train the dense network for T epochs from θ₀.

    Returns:
        (θ_T, snapshots) where snapshots maps k → θₖ when `config.rewind_epoch` = k is set.
    """
    snapshot_epochs = () if config.rewind_epoch is None else (config.rewind_epoch,)
    result = train(model, theta_0, dataset, config, snapshot_epochs=snapshot_epochs, eval_dataset=eval_dataset, progress=progress)
    theta_T = result.params
    theta_T.provenance = f"pretrained({config.epochs})"
    for k, snap in result.snapshots.items():
        snap.provenance = f"rewind({k})"
    return theta_T, result.snapshots


def sparse_train(
    model: ModelSpec,
    start: ParamSet,
    mask: Mask,
    dataset: Dataset,
    config: TrainConfig,
    epochs: Optional[int] = None,
    grad_hook: Optional[GradHook] = None,
    epoch_callback=None,
    eval_dataset: Optional[Dataset] = None,
) -> ParamSet:
    """Train start⊙m for T epochs with m held fixed.

    Starting from θ₀, θ₀′ or θₖ this yields (θ₀⊙m)_T, (θ₀′⊙m)_T or (θₖ⊙m)_T.
    """
    result = train(
        model, start, dataset, config, mask=mask, epochs=epochs,
        grad_hook=grad_hook, epoch_callback=epoch_callback, eval_dataset=eval_dataset,
    )
    result.params.provenance = "sparse_trained"
    return result.params


def rewind_train(model: ModelSpec, theta_k: ParamSet, mask: Mask, dataset: Dataset, config: TrainConfig, **kwargs) -> ParamSet:
    """Sparse training from the rewound weights θₖ⊙m."""
    params = sparse_train(model, theta_k, mask, dataset, config, **kwargs)
    params.metadata["rewound_from"] = theta_k.provenance
    return params


def prune_and_finetune(
    model: ModelSpec, theta_T: ParamSet, mask: Mask, dataset: Dataset, config: TrainConfig, **kwargs
) -> ParamSet:
    """Apply m to θ_T and fine-tune for T′ = `config.epochs` epochs with the schedule restarted."""
    result = train(model, theta_T, dataset, config, mask=mask, **kwargs)
    result.params.provenance = "finetuned"
    return result.params


@dataclass
class RegimeSpec:
    """One weight/mask lifecycle: which start weights, which mask, how many epochs."""

    kind: str
    mask: Optional[Mask] = None
    epochs: Optional[int] = None

    def validate(self, snapshots: Optional[dict] = None, rewind_epoch: Optional[int] = None) -> None:
        if self.kind not in REGIME_CODES:
            raise ConfigurationError(f"Unknown regime: {self.kind}.")
        if self.kind == "pretrain" and self.mask is not None:
            raise ConfigurationError("pretraining takes no mask")
        if self.kind != "pretrain" and self.mask is None:
            raise ConfigurationError(f"the {self.kind} regime needs a mask")
        if self.kind == "rewind" and (rewind_epoch is None or snapshots is None or rewind_epoch not in snapshots):
            raise ConfigurationError("the rewind regime needs a stored θₖ (set train.rewind_epoch)")

    @property
    def start_source(self) -> str:
        return START_SOURCES[self.kind]


def run_regime(
    spec: RegimeSpec,
    model: ModelSpec,
    dataset: Dataset,
    config: TrainConfig,
    theta_0: ParamSet,
    theta_0_prime: Optional[ParamSet] = None,
    theta_T: Optional[ParamSet] = None,
    snapshots: Optional[dict] = None,
) -> ParamSet:
    """Dispatch a `RegimeSpec` to the matching training function."""
    spec.validate(snapshots, config.rewind_epoch)
    if spec.epochs is not None:
        config = replace(config, epochs=spec.epochs)
    if spec.kind == "pretrain":
        return pretrain(model, theta_0, dataset, config)[0]
    if spec.kind == "ticket":
        return sparse_train(model, theta_0, spec.mask, dataset, config)
    if spec.kind == "reinit":
        if theta_0_prime is None:
            raise ConfigurationError("the reinit regime needs θ₀′")
        return sparse_train(model, theta_0_prime, spec.mask, dataset, config)
    if spec.kind == "rewind":
        return rewind_train(model, snapshots[config.rewind_epoch], spec.mask, dataset, config)
    if theta_T is None:
        raise ConfigurationError("the finetune regime needs θ_T")
    return prune_and_finetune(model, theta_T, spec.mask, dataset, config)


@dataclass
class WinningVerdict:
    """The two-aspect winning-property check, in percentage points.

    aspect1: the ticket reaches the dense accuracy within `epsilon`.
    aspect2: the ticket beats random reinitialization by more than `delta`.
    """

    aspect1: bool
    aspect2: bool
    epsilon: float
    delta: float
    acc_dense: float
    acc_ticket: float
    acc_reinit: float

    @property
    def holds(self) -> bool:
        return self.aspect1 and self.aspect2


def evaluate_winning_property(
    acc_dense: float, acc_ticket: float, acc_reinit: float, epsilon: float = 0.5, delta: float = 0.5
) -> WinningVerdict:
    """Accuracies are fractions in [0, 1]; `epsilon` and `delta` are percentage points."""
    for acc in (acc_dense, acc_ticket, acc_reinit):
        if not 0.0 <= acc <= 1.0:
            raise ConfigurationError(f"accuracies must lie in [0, 1], got {acc}")
    dense, ticket, reinit = 100.0 * acc_dense, 100.0 * acc_ticket, 100.0 * acc_reinit
    return WinningVerdict(
        aspect1=bool(ticket >= dense - epsilon),
        aspect2=bool(ticket - reinit > delta),
        epsilon=epsilon,
        delta=delta,
        acc_dense=acc_dense,
        acc_ticket=acc_ticket,
        acc_reinit=acc_reinit,
    )
