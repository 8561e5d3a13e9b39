"""Multi-seed execution of the regime suite.

Work runs in three stages, each a list of independent tasks mapped over a worker
pool: pretraining per (learning rate, seed), mask generation per
(learning rate, seed, algorithm, sparsity), then one cell per regime. Every task
is a pure function of its inputs, so the report does not depend on the worker
count or on the order tasks finish in.
"""

from dataclasses import dataclass, field, replace
import functools
import logging
import multiprocessing
from pathlib import Path
from typing import Callable, Optional, Sequence

from tqdm import tqdm

from .checkpoint import Checkpoint, save_checkpoint
from .config import ExperimentConfig, TrainConfig, config_digest, with_lr
from .correlation import correlation_report
from .datasets import Dataset
from .masking import Mask, apply_mask
from .model import ModelSpec, ParamSet, accuracy, init_params
from .pruning import generate_mask
from .regimes import REGIME_CODES, RegimeSpec, evaluate_winning_property, pretrain, run_regime
from .report import ExperimentReport
from .rng import derive_seed, reinit_seed

logger = logging.getLogger(__name__)


# derive_seed keys of the data-order and augmentation seeds of sparse cells
CELL_ORDER_CODE = 16
CELL_AUGMENT_CODE = 17


def sparsity_key(s: float) -> int:
    return int(round(s * 1_000_000))


def pretrain_seed(seed: int) -> int:
    return derive_seed(seed, REGIME_CODES["pretrain"], 0)


def cell_seed(seed: int, sparsity: float) -> int:
    """Data-order seed at (seed, sparsity): shared by every regime, algorithm and learning rate."""
    return derive_seed(seed, CELL_ORDER_CODE, sparsity_key(sparsity))


def cell_augment_seed(seed: int, regime: str, sparsity: float) -> int:
    """Augmentation seed of one regime cell."""
    return derive_seed(seed, CELL_AUGMENT_CODE, REGIME_CODES[regime], sparsity_key(sparsity))


def cell_train_config(train: TrainConfig, seed: int, regime: str, sparsity: float = 0.0) -> TrainConfig:
    """The train config of one cell.

    Every regime at (seed, sparsity) sees the same batch order, so ticket, reinit, rewind
    and finetune differ only in their start weights and their augmentation draws.
    """
    if regime == "pretrain":
        return replace(train, seed=pretrain_seed(seed), augment_seed=None)
    return replace(
        train, seed=cell_seed(seed, sparsity), augment_seed=cell_augment_seed(seed, regime, sparsity)
    )


@dataclass
class PretrainResult:
    lr0: float
    seed: int
    train_seed: int
    theta_0: Optional[ParamSet] = None
    theta_0_prime: Optional[ParamSet] = None
    theta_T: Optional[ParamSet] = None
    snapshots: dict = field(default_factory=dict)
    accuracy: Optional[float] = None
    correlations: list = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class MaskResult:
    lr0: float
    seed: int
    algorithm: str
    sparsity: float
    mask: Optional[Mask] = None
    error: Optional[str] = None

    @property
    def mask_epochs(self) -> Optional[int]:
        return None if self.mask is None else self.mask.metadata.get("mask_epochs")


@dataclass
class CellResult:
    row: dict
    correlations: list = field(default_factory=list)
    params: Optional[ParamSet] = None


def _describe(e: Exception) -> str:
    return f"{type(e).__name__}: {e}"


def _pretrain_task(
    model: ModelSpec, train_set: Dataset, test_set: Dataset, config: ExperimentConfig, lr0: float, seed: int
) -> PretrainResult:
    train_config = cell_train_config(with_lr(config.train, lr0), seed, "pretrain")
    result = PretrainResult(lr0, seed, train_config.seed)
    try:
        result.theta_0 = init_params(model, seed, config.precision)
        result.theta_0_prime = init_params(model, reinit_seed(seed), config.precision, purpose="reinit")
        result.theta_T, result.snapshots = pretrain(model, result.theta_0, train_set, train_config, eval_dataset=test_set)
        result.accuracy = accuracy(model, result.theta_T, test_set)
        result.correlations.append(
            correlation_report(
                result.theta_0, result.theta_T, config.p_grid,
                null_trials=config.null_trials, seed=seed, labels=("theta0", "thetaT"),
            )
        )
    except Exception as e:
        result.error = _describe(e)
    return result


def _mask_task(
    model: ModelSpec, train_set: Dataset, config: ExperimentConfig, pre: PretrainResult, algorithm: str, s: float
) -> MaskResult:
    result = MaskResult(pre.lr0, pre.seed, algorithm, s)
    try:
        train_config = cell_train_config(with_lr(config.train, pre.lr0), pre.seed, "pretrain")
        prune_config = replace(config.prune, algorithm=algorithm, target_sparsity=s)
        result.mask = generate_mask(model, train_set, pre.theta_0, pre.theta_T, train_config, prune_config)
    except Exception as e:
        result.error = _describe(e)
    return result


def _cell_task(
    model: ModelSpec,
    train_set: Dataset,
    test_set: Dataset,
    config: ExperimentConfig,
    pre: PretrainResult,
    masked: MaskResult,
    regime: str,
) -> CellResult:
    s = masked.sparsity
    train_config = cell_train_config(with_lr(config.train, pre.lr0), pre.seed, regime, s)
    row = {
        "lr0": pre.lr0,
        "seed": pre.seed,
        "algorithm": masked.algorithm,
        "sparsity": s,
        "regime": regime,
        "train_seed": train_config.seed,
        "mask_epochs": masked.mask_epochs,
    }
    result = CellResult(row)
    try:
        spec = RegimeSpec(regime, masked.mask)
        params = run_regime(spec, model, train_set, train_config, pre.theta_0, pre.theta_0_prime, pre.theta_T, pre.snapshots)
        row["accuracy"] = accuracy(model, params, test_set)
        start = {"ticket": pre.theta_0, "reinit": pre.theta_0_prime, "finetune": pre.theta_T}.get(regime)
        if start is None:
            start = pre.snapshots[config.train.rewind_epoch]
        row["r_start"] = correlation_report(
            apply_mask(start, masked.mask), params, [config.sparse_p], "sparse_sparse", masked.mask,
            null_trials=config.null_trials, seed=pre.seed,
        ).values[0]
        if regime == "finetune":
            result.correlations += _finetune_correlations(config, pre, masked.mask, params, s)
            for rep in result.correlations:
                column = {
                    ("theta0_masked", "sparse_sparse"): "r_theta0_masked",
                    ("reinit_masked", "sparse_sparse"): "r_reinit_masked",
                    ("theta0", "sparse_dense"): "r_theta0",
                    ("thetaT", "sparse_dense"): "r_thetaT",
                }[(rep.b, rep.scenario)]
                row[column] = rep.values[0]
        row["status"] = "ok"
        result.params = params
    except Exception as e:
        row["status"] = "failed"
        row["error"] = _describe(e)
    return result


def _finetune_correlations(config: ExperimentConfig, pre: PretrainResult, mask: Mask, params: ParamSet, s: float) -> list:
    """R_p of (θ_T⊙m)_T′ against the masked initializations and, when defined, the dense θ₀ and θ_T."""
    p = [config.sparse_p]
    kwargs = {"null_trials": config.null_trials, "seed": pre.seed}
    reports = [
        correlation_report(params, apply_mask(pre.theta_0, mask), p, "sparse_sparse", mask, labels=("finetuned", "theta0_masked"), **kwargs),
        correlation_report(params, apply_mask(pre.theta_0_prime, mask), p, "sparse_sparse", mask, labels=("finetuned", "reinit_masked"), **kwargs),
    ]
    if config.sparse_p < 1.0 - s:
        reports += [
            correlation_report(params, pre.theta_0, p, "sparse_dense", mask, labels=("finetuned", "theta0"), **kwargs),
            correlation_report(params, pre.theta_T, p, "sparse_dense", mask, labels=("finetuned", "thetaT"), **kwargs),
        ]
    return reports


def _run_tasks(fn: Callable, tasks: Sequence, workers: int, desc: str, progress: bool) -> list:
    """Call `fn(*task)` for every task, in a process pool when workers > 1; results keep task order."""
    if workers == 1 or len(tasks) <= 1:
        return [fn(*task) for task in tqdm(tasks, desc=desc, disable=not progress)]
    with multiprocessing.Pool(processes=min(workers, len(tasks))) as pool:
        pending = [pool.apply_async(fn, task) for task in tasks]
        results = [p.get() for p in tqdm(pending, desc=desc, disable=not progress)]
        pool.close()
        pool.join()
    return results


def _failed(lr0: float, seed: int, algorithm: str, s: float, regime: str, stage: str, error: str) -> dict:
    return {
        "lr0": lr0,
        "seed": seed,
        "algorithm": algorithm,
        "sparsity": s,
        "regime": regime,
        "status": "failed",
        "error": f"{stage} failed: {error}",
    }


def run_regime_suite(
    model: ModelSpec,
    train_set: Dataset,
    test_set: Dataset,
    config: ExperimentConfig,
    checkpoint_dir=None,
    progress: bool = False,
) -> ExperimentReport:
    """Pretrain, generate masks and run every regime cell of `config`.

    For every learning rate in `config.learning_rates` (default [train.lr0]) and every
    seed: pretrain once, build one mask per (algorithm, sparsity), then train each regime
    in `config.regimes` under that mask. Errors are recorded on their cell (and on the
    cells that depend on it); the remaining cells still run.

    Args:
        checkpoint_dir: When given (and `config.save_checkpoints`), θ₀, θ₀′, θₖ, θ_T, the
            masks and trained results are written below it.

    Returns:
        The report, rows sorted by (lr0, seed, algorithm, sparsity, regime).
    """
    digest = config_digest(config)
    learning_rates = list(config.learning_rates) or [config.train.lr0]
    algorithms = list(config.algorithms) or [config.prune.algorithm]
    regimes = [r for r in config.regimes if r != "pretrain"]
    report = ExperimentReport(
        digest,
        config.epsilon,
        config.delta,
        metadata={
            "learning_rates": learning_rates,
            "algorithms": algorithms,
            "seeds": list(config.seeds),
            "reinit_seeds": {str(s): reinit_seed(s) for s in config.seeds},
        },
    )
    store = _CheckpointStore(checkpoint_dir if config.save_checkpoints else None, config, model, digest)

    pre_jobs = [(lr0, seed) for lr0 in learning_rates for seed in config.seeds]
    pretrained = _run_tasks(
        functools.partial(_pretrain_task, model, train_set, test_set, config), pre_jobs, config.workers, "pretrain", progress
    )
    mask_jobs = []
    for pre in pretrained:
        row = {
            "lr0": pre.lr0,
            "seed": pre.seed,
            "algorithm": "dense",
            "sparsity": 0.0,
            "regime": "pretrain",
            "train_seed": pre.train_seed,
            "mask_epochs": 0,
        }
        if pre.error is not None:
            report.add({**row, "status": "failed", "error": pre.error})
            logger.warning("pretrain lr0=%g seed=%d failed: %s", pre.lr0, pre.seed, pre.error)
            for alg in algorithms:
                for s in config.sparsity_grid:
                    for regime in regimes:
                        report.add(_failed(pre.lr0, pre.seed, alg, s, regime, "pretrain", pre.error))
            continue
        report.add({**row, "status": "ok", "accuracy": pre.accuracy})
        for rep in pre.correlations:
            report.add_correlation(rep, lr0=pre.lr0, seed=pre.seed, algorithm="dense", sparsity=0.0)
        logger.info("pretrain lr0=%g seed=%d accuracy %.4f", pre.lr0, pre.seed, pre.accuracy)
        store.save_pretrained(pre)
        mask_jobs += [(pre, alg, s) for alg in algorithms for s in config.sparsity_grid]

    masks = _run_tasks(
        functools.partial(_mask_task, model, train_set, config), mask_jobs, config.workers, "masks", progress
    )
    cell_jobs = []
    for (pre, _, _), masked in zip(mask_jobs, masks):
        if masked.error is not None:
            logger.warning(
                "%s mask lr0=%g seed=%d s=%g failed: %s", masked.algorithm, pre.lr0, pre.seed, masked.sparsity, masked.error
            )
            for regime in regimes:
                report.add(_failed(pre.lr0, pre.seed, masked.algorithm, masked.sparsity, regime, "mask generation", masked.error))
            continue
        store.save(pre, f"mask-{masked.algorithm}-s{masked.sparsity:g}", mask=masked.mask, provenance=f"mask-{masked.algorithm}")
        cell_jobs += [(pre, masked, regime) for regime in regimes]

    cells = _run_tasks(
        functools.partial(_cell_task, model, train_set, test_set, config), cell_jobs, config.workers, "cells", progress
    )
    for (pre, masked, regime), cell in zip(cell_jobs, cells):
        row = cell.row
        for rep in cell.correlations:
            report.add_correlation(rep, lr0=pre.lr0, seed=pre.seed, algorithm=masked.algorithm, sparsity=masked.sparsity)
        if row["status"] == "ok":
            logger.info(
                "%s lr0=%g seed=%d %s s=%g accuracy %.4f",
                regime, pre.lr0, pre.seed, masked.algorithm, masked.sparsity, row["accuracy"],
            )
            store.save(pre, f"{regime}-{masked.algorithm}-s{masked.sparsity:g}", params=cell.params, mask=masked.mask)
        else:
            logger.warning(
                "%s cell lr0=%g seed=%d %s s=%g failed: %s",
                regime, pre.lr0, pre.seed, masked.algorithm, masked.sparsity, row["error"],
            )
        report.add(row)

    _stamp_verdicts(report, config)
    report.sort()
    return report


def _stamp_verdicts(report: ExperimentReport, config: ExperimentConfig) -> None:
    """Per-seed winning verdicts on the ticket rows."""
    acc = {
        (r["lr0"], r["seed"], r["algorithm"], r["sparsity"], r["regime"]): r["accuracy"]
        for r in report.rows
        if r["status"] == "ok"
    }
    for row in report.rows:
        if row["regime"] != "ticket" or row["status"] != "ok":
            continue
        dense = acc.get((row["lr0"], row["seed"], "dense", 0.0, "pretrain"))
        reinit = acc.get((row["lr0"], row["seed"], row["algorithm"], row["sparsity"], "reinit"))
        if dense is None or reinit is None:
            continue
        verdict = evaluate_winning_property(dense, row["accuracy"], reinit, config.epsilon, config.delta)
        row.update(aspect1=verdict.aspect1, aspect2=verdict.aspect2, winning=verdict.holds)


class _CheckpointStore:
    """Writes suite artifacts under `<root>/lr<lr0>-seed<seed>/<name>.tklb`; a no-op without a root."""

    def __init__(self, root, config: ExperimentConfig, model: ModelSpec, digest: str):
        self.root = None if root is None else Path(root)
        self.precision = config.precision
        self.epochs = config.train.epochs
        self.model_digest = model.digest()
        self.digest = digest

    def save(self, pre: PretrainResult, name: str, **fields) -> None:
        if self.root is None:
            return
        checkpoint = Checkpoint(self.precision, self.model_digest, self.digest, **fields)
        save_checkpoint(self.root / f"lr{pre.lr0:g}-seed{pre.seed}" / f"{name}.tklb", checkpoint)

    def save_pretrained(self, pre: PretrainResult) -> None:
        self.save(pre, "theta0", params=pre.theta_0, epoch=0)
        self.save(pre, "theta0prime", params=pre.theta_0_prime, epoch=0)
        self.save(pre, "thetaT", params=pre.theta_T, epoch=self.epochs)
        for k, snap in pre.snapshots.items():
            self.save(pre, f"theta_k{k}", params=snap, epoch=k)
