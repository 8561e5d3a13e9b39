"""Mask generation: one-shot magnitude pruning, iterative magnitude pruning with reset
to θ₀, and ADMM-based pruning.

All three prune every non-exempt prunable layer to the same target sparsity and keep
exactly `per_layer_keep_counts` weights per layer.
"""

from dataclasses import dataclass, field, replace
import logging
import math
from typing import Optional, Sequence

import numpy as np

from .config import ALGORITHMS, PruneConfig, TrainConfig, config_to_dict, digest, validate_prune_config
from .datasets import Dataset
from .errors import ConfigurationError, CongruenceError, NumericFailure
from .masking import Mask, first_prunable_exempt
from .model import ModelSpec, ParamSet
from .regimes import sparse_train, train

logger = logging.getLogger(__name__)


def keep_count(size: int, keep_fraction: float) -> int:
    """round-half-up(keep_fraction · size), floored at 1."""
    return max(1, int(math.floor(keep_fraction * size + 0.5)))


def per_layer_keep_counts(
    layer_sizes: Sequence[int], target_sparsity: float, exempt_flags: Optional[Sequence[bool]] = None
) -> list[int]:
    """Number of weights each layer keeps at a uniform per-layer sparsity.

    Args:
        layer_sizes: N_l for every prunable layer.
        target_sparsity: s in [0, 1).
        exempt_flags: True for layers that are never pruned (they keep N_l).

    Returns:
        k_l = max(1, round((1 - s) · N_l)) for pruned layers, N_l for exempt ones.
    """
    if not 0 <= target_sparsity < 1:
        raise ConfigurationError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    if exempt_flags is None:
        exempt_flags = [False] * len(layer_sizes)
    if len(exempt_flags) != len(layer_sizes):
        raise CongruenceError(f"{len(exempt_flags)} exempt flags for {len(layer_sizes)} layers")
    return [
        int(n) if exempt else min(int(n), keep_count(int(n), 1.0 - target_sparsity))
        for n, exempt in zip(layer_sizes, exempt_flags)
    ]


def topk_indices(values: np.ndarray, k: int, candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """Flat indices of the k largest |values|, ties to the smaller flat index.

    When `candidates` (a boolean array of the same shape) is given, only those positions
    compete.
    """
    flat = np.abs(np.asarray(values)).ravel()
    if candidates is not None:
        allowed = np.asarray(candidates, dtype=bool).ravel()
        if allowed.shape != flat.shape:
            raise CongruenceError(f"candidate set of size {allowed.size} for a tensor of size {flat.size}")
        if k > int(allowed.sum()):
            raise ConfigurationError(f"cannot keep {k} of {int(allowed.sum())} candidates")
        # excluded positions sort after every candidate
        flat = np.where(allowed, flat, -1.0)
    if not 0 <= k <= flat.size:
        raise ConfigurationError(f"k must be in [0, {flat.size}], got {k}")
    return np.argsort(-flat, kind="stable")[:k]


def topk_mask(values: np.ndarray, k: int, candidates: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean tensor with ones at the k largest-magnitude entries of `values`."""
    out = np.zeros(np.size(values), dtype=bool)
    out[topk_indices(values, k, candidates)] = True
    return out.reshape(np.shape(values))


def _exempt_flags(params: ParamSet, exempt_names) -> list[bool]:
    return [e.name in exempt_names for e in params.prunable()]


def magnitude_mask(
    params: ParamSet, keep_counts: Sequence[int], exempt_names=frozenset(), previous: Optional[Mask] = None
) -> Mask:
    """Per-layer top-k mask of `params`, restricted to the support of `previous` when given."""
    prunable = params.prunable()
    if len(keep_counts) != len(prunable):
        raise CongruenceError(f"{len(keep_counts)} keep counts for {len(prunable)} prunable layers")
    prev = previous.as_dict() if previous is not None else {}
    entries = []
    for entry, k in zip(prunable, keep_counts):
        if entry.name in exempt_names:
            entries.append((entry.name, np.ones(entry.value.shape, dtype=bool)))
        else:
            entries.append((entry.name, topk_mask(entry.value, k, prev.get(entry.name))))
    return Mask(entries, frozenset(exempt_names))


def one_shot_prune(theta_T: ParamSet, config: PruneConfig) -> Mask:
    """Zero out the fraction s of smallest-magnitude trained weights in every layer."""
    exempt = first_prunable_exempt(theta_T, config.exempt_first)
    counts = per_layer_keep_counts(theta_T.layer_sizes(), config.target_sparsity, _exempt_flags(theta_T, exempt))
    return magnitude_mask(theta_T, counts, exempt)


def per_round_rate(target_sparsity: float, rounds: int) -> float:
    """r = 1 − (1 − s)^(1/n)."""
    return 1.0 - (1.0 - target_sparsity) ** (1.0 / rounds)


def iterative_prune(
    model: ModelSpec,
    dataset: Dataset,
    theta_0: ParamSet,
    train_config: TrainConfig,
    prune_config: PruneConfig,
    theta_T: Optional[ParamSet] = None,
    history: Optional[list] = None,
) -> Mask:
    """Iterative magnitude pruning with weight reset to θ₀.

    Round j trains θ₀⊙m_{j−1} (m_{j−1} held fixed) and then removes the fraction r of the
    still-kept weights with the smallest magnitude in each layer, so after n rounds each
    layer keeps round((1 − s)·N_l) weights. The first round trains the dense network, so a
    pretrained θ_T from the same train config can be passed in to skip it.

    Args:
        theta_T: Optional dense result of round 1.
        history: When given, each round's mask is appended to it.

    Raises:
        NumericFailure: with the round index attached.
    """
    rounds = prune_config.rounds
    rate = per_round_rate(prune_config.target_sparsity, rounds)
    epochs = train_config.epochs if prune_config.round_epochs is None else prune_config.round_epochs
    round_config = replace(train_config, epochs=epochs, rewind_epoch=None)
    exempt = first_prunable_exempt(theta_0, prune_config.exempt_first)
    flags = _exempt_flags(theta_0, exempt)
    sizes = theta_0.layer_sizes()
    mask = Mask.ones(theta_0, exempt)
    for j in range(1, rounds + 1):
        if j == 1 and theta_T is not None and epochs == train_config.epochs:
            trained = theta_T
        else:
            try:
                trained = sparse_train(model, theta_0, mask, dataset, round_config)
            except NumericFailure as e:
                raise e.at(prune_round=j) from e
        target = prune_config.target_sparsity if j == rounds else 1.0 - (1.0 - rate) ** j
        counts = per_layer_keep_counts(sizes, target, flags)
        counts = [min(k, kept) for k, kept in zip(counts, mask.kept_counts())]
        mask = magnitude_mask(trained, counts, exempt, previous=mask)
        logger.debug("iterative round %d/%d: kept %s", j, rounds, mask.kept_counts())
        if history is not None:
            history.append(mask)
    return mask


def admm_project(W_plus_U: ParamSet, keep_counts: Sequence[int], exempt_names=frozenset()) -> ParamSet:
    """Euclidean projection onto the per-layer sparsity set: keep the k_l largest |·| entries.

    Non-prunable and exempt entries are returned unchanged.
    """
    prunable = W_plus_U.prunable_names
    if len(keep_counts) != len(prunable):
        raise CongruenceError(f"{len(keep_counts)} keep counts for {len(prunable)} prunable layers")
    counts = dict(zip(prunable, keep_counts))
    values = []
    for entry in W_plus_U:
        if entry.prunable and entry.name not in exempt_names:
            values.append(entry.value * topk_mask(entry.value, counts[entry.name]))
        else:
            values.append(entry.value.copy())
    return W_plus_U.with_values(values, provenance="admm_Z")


@dataclass
class AdmmState:
    """Primal weights W, their projection Z and the scaled dual U."""

    W: ParamSet
    Z: ParamSet
    U: ParamSet
    iteration: int = 0
    residuals: list = field(default_factory=list)

    def w_plus_u(self) -> ParamSet:
        return self.W.with_values([w.value + u.value for w, u in zip(self.W, self.U)])

    def residual(self) -> float:
        """‖W − Z‖₂ over the prunable entries."""
        total = sum(float(np.sum((w.value - z.value) ** 2)) for w, z in zip(self.W, self.Z) if w.prunable)
        return math.sqrt(total)


def admm_penalty_hook(state: AdmmState, rho: float):
    """Gradient hook adding ρ(W − Z + U) to the prunable gradients."""

    def hook(params: ParamSet, grads: ParamSet) -> ParamSet:
        values = []
        for w, g, z, u in zip(params, grads, state.Z, state.U):
            if w.prunable:
                values.append(g.value + w.value.dtype.type(rho) * (w.value - z.value + u.value))
            else:
                values.append(g.value)
        return grads.with_values(values)

    return hook


def admm_inner_config(train_config: TrainConfig, prune_config: PruneConfig) -> TrainConfig:
    """Inner-loop training config: `inner_epochs` (default T // 5) at a constant lr."""
    admm = prune_config.admm
    epochs = train_config.epochs // 5 if admm.inner_epochs is None else admm.inner_epochs
    lr = train_config.lr0 * train_config.decay_factor if admm.lr is None else admm.lr
    batch_size = train_config.batch_size if admm.inner_batch_size is None else admm.inner_batch_size
    return replace(train_config, epochs=epochs, lr0=lr, milestones=[], rewind_epoch=None, batch_size=batch_size)


def admm_prune(
    model: ModelSpec,
    dataset: Dataset,
    theta_T: ParamSet,
    train_config: TrainConfig,
    prune_config: PruneConfig,
    state_out: Optional[list] = None,
) -> Mask:
    """ADMM-based pruning from pretrained weights.

    W = θ_T, Z = Π(W), U = 0; then `outer_iters` times: train W for the inner epochs on
    loss + (ρ/2)‖W − Z + U‖², Z ← Π(W + U), U ← U + W − Z. The momentum buffers carry
    over from one W-solve to the next. The mask is the support of the
    final Z (top-k of the last W + U, so exactly k_l ones even where entries are zero).

    Raises:
        NumericFailure: with the outer-iteration index attached.
    """
    admm = prune_config.admm
    exempt = first_prunable_exempt(theta_T, prune_config.exempt_first)
    counts = per_layer_keep_counts(theta_T.layer_sizes(), prune_config.target_sparsity, _exempt_flags(theta_T, exempt))
    inner = admm_inner_config(train_config, prune_config)
    W = theta_T.copy()
    state = AdmmState(W, admm_project(W, counts, exempt), W.with_values([np.zeros_like(e.value) for e in W]))
    projected_from = W
    velocity = None
    for it in range(1, admm.outer_iters + 1):
        try:
            result = train(model, state.W, dataset, inner, grad_hook=admm_penalty_hook(state, admm.rho), velocity=velocity)
            state.W, velocity = result.params, result.velocity
        except NumericFailure as e:
            raise e.at(outer_iter=it) from e
        projected_from = state.w_plus_u()
        state.Z = admm_project(projected_from, counts, exempt)
        state.U = state.U.with_values([u.value + w.value - z.value for u, w, z in zip(state.U, state.W, state.Z)])
        state.iteration = it
        state.residuals.append(state.residual())
        logger.debug("admm outer %d/%d: residual %.6g", it, admm.outer_iters, state.residuals[-1])
    if state_out is not None:
        state_out.append(state)
    return magnitude_mask(projected_from, counts, exempt)


class BasePruner:
    """Generates a Mask and records how it was made.

    Attributes:
        name: The algorithm name (one of `ALGORITHMS`).
        metadata: Settings and costs of the last `prune` call; copied into the mask.
    """

    name: str

    def __init__(self, config: PruneConfig):
        validate_prune_config(config)
        self.config = config
        self.metadata = {}

    def prune(
        self,
        model: ModelSpec,
        dataset: Dataset,
        theta_0: ParamSet,
        theta_T: ParamSet,
        train_config: TrainConfig,
    ) -> Mask:
        """Generate the mask for `model` trained on `dataset`.

        Args:
            theta_0: The initialization θ₀.
            theta_T: The pretrained weights θ_T (trained from θ₀ with `train_config`).

        Returns:
            The Mask, with `self.metadata` merged into `mask.metadata`.
        """
        raise NotImplementedError()

    def _stamp(self, mask: Mask, **extra) -> Mask:
        self.metadata = {
            "algorithm": self.name,
            "config_digest": digest(config_to_dict(self.config)),
            "target_sparsity": self.config.target_sparsity,
            "exempt": sorted(mask.exempt_names),
            **extra,
        }
        mask.metadata.update(self.metadata)
        return mask


class OneShotPruner(BasePruner):
    name = "one_shot"

    def prune(self, model, dataset, theta_0, theta_T, train_config):
        return self._stamp(one_shot_prune(theta_T, self.config), mask_epochs=0)


class IterativePruner(BasePruner):
    name = "iterative"

    def prune(self, model, dataset, theta_0, theta_T, train_config):
        epochs = train_config.epochs if self.config.round_epochs is None else self.config.round_epochs
        reuse = theta_T is not None and epochs == train_config.epochs
        mask = iterative_prune(model, dataset, theta_0, train_config, self.config, theta_T=theta_T)
        return self._stamp(
            mask,
            rounds=self.config.rounds,
            per_round_rate=per_round_rate(self.config.target_sparsity, self.config.rounds),
            round_epochs=epochs,
            # round 1 reuses pretraining when the epoch counts match
            mask_epochs=epochs * (self.config.rounds - 1 if reuse else self.config.rounds),
        )


class AdmmPruner(BasePruner):
    name = "admm"

    def prune(self, model, dataset, theta_0, theta_T, train_config):
        states = []
        mask = admm_prune(model, dataset, theta_T, train_config, self.config, state_out=states)
        inner = admm_inner_config(train_config, self.config)
        return self._stamp(
            mask,
            rho=self.config.admm.rho,
            outer_iters=self.config.admm.outer_iters,
            inner_epochs=inner.epochs,
            inner_lr=inner.lr0,
            inner_batch_size=inner.batch_size,
            residuals=states[0].residuals,
            mask_epochs=inner.epochs * self.config.admm.outer_iters,
        )


def load_pruner(config: PruneConfig) -> BasePruner:
    if config.algorithm == "one_shot":
        return OneShotPruner(config)
    elif config.algorithm == "iterative":
        return IterativePruner(config)
    elif config.algorithm == "admm":
        return AdmmPruner(config)
    raise ConfigurationError(f"Unknown pruning algorithm: {config.algorithm}. Expected one of {ALGORITHMS}.")


def generate_mask(
    model: ModelSpec,
    dataset: Dataset,
    theta_0: ParamSet,
    theta_T: ParamSet,
    train_config: TrainConfig,
    prune_config: PruneConfig,
) -> Mask:
    """Dispatch to the configured algorithm; the mask metadata records it with its config digest."""
    pruner = load_pruner(prune_config)
    mask = pruner.prune(model, dataset, theta_0, theta_T, train_config)
    logger.info(
        "%s mask at sparsity %.3g: kept %d of %d prunable weights",
        pruner.name,
        prune_config.target_sparsity,
        sum(mask.kept_counts()),
        sum(mask.sizes()),
    )
    return mask
