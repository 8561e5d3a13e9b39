"""Command-line entry point.

    python -m ticketlab run --config experiment/configs/debug.yaml
    python -m ticketlab pretrain --config CONFIG
    python -m ticketlab prune --config CONFIG --alg one_shot --sparsity 0.5
    python -m ticketlab sparse-train --config CONFIG --alg one_shot --sparsity 0.5 --start theta0
    python -m ticketlab finetune --config CONFIG --alg one_shot --sparsity 0.5
    python -m ticketlab correlate --config CONFIG --a theta0 --b thetaT --p 0.1..0.5
    python -m ticketlab report --raw results/raw.csv

Exit codes: 0 success, 1 a cell or stage failed, 2 invalid configuration,
3 I/O failure (missing upstream checkpoint, unreadable IDX or checkpoint file).
"""

from argparse import ArgumentParser
from dataclasses import replace
import json
import logging
from pathlib import Path
import sys
from typing import Optional

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ALGORITHMS, ExperimentConfig, config_digest, load_config
from .correlation import SCENARIOS, correlation_report
from .datasets import load_dataset
from .errors import CheckpointError, ConfigurationError, CongruenceError, DependencyError, IdxError, LabError
from .masking import apply_mask, per_layer_sparsity, sparsity
from .model import ModelSpec, accuracy, init_params
from .pruning import generate_mask
from .regimes import pretrain, prune_and_finetune, rewind_train, sparse_train
from .report import AGGREGATE_CSV, CSV_OPTIONS, DIGEST_FILE, REPORT_JSON, aggregate, print_summary, read_raw
from .rng import reinit_seed
from .suite import cell_train_config, run_regime_suite

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
START_NAMES = {"theta0": ("ticket", "theta0"), "reinit": ("reinit", "theta0prime"), "rewind": ("rewind", None)}


def parse_p_grid(text: str) -> list[float]:
    """`0.1..0.5` (step 0.1), `0.1..0.5:0.05`, or a comma list `0.1,0.2`."""
    try:
        if ".." in text:
            span, _, step = text.partition(":")
            low, high = (float(x) for x in span.split(".."))
            step = float(step) if step else 0.1
            if step <= 0 or high < low:
                raise ValueError
            count = int(round((high - low) / step)) + 1
            return [round(low + i * step, 10) for i in range(count)]
        return [float(x) for x in text.split(",") if x]
    except ValueError:
        raise ConfigurationError(f"cannot parse p grid {text!r}; use 0.1..0.5, 0.1..0.5:0.05 or 0.1,0.2")


class Session:
    """Model, data and checkpoint locations shared by the stage subcommands."""

    def __init__(self, config: ExperimentConfig, seed: Optional[int] = None):
        self.config = config
        self.seed = config.seeds[0] if seed is None else seed
        self.model = ModelSpec.from_config(config.model)
        self.train_set, self.test_set = load_dataset(config.data)
        self.digest = config_digest(config)
        self.dir = Path(config.output_dir) / "stages" / f"seed{self.seed}"

    def path(self, name: str) -> Path:
        return self.dir / f"{name}.tklb"

    def train_config(self, regime: str, s: float = 0.0):
        return cell_train_config(self.config.train, self.seed, regime, s)

    def load(self, name: str, stage: str) -> Checkpoint:
        path = self.path(name)
        if not path.exists():
            raise DependencyError(path, stage)
        return load_checkpoint(path, model_digest=self.model.digest(), precision=self.config.precision)

    def save(self, name: str, **fields) -> Path:
        path = self.path(name)
        save_checkpoint(path, Checkpoint(self.config.precision, self.model.digest(), self.digest, **fields))
        logger.info("wrote %s", path)
        return path

    def mask_name(self, algorithm: str, s: float) -> str:
        return f"mask-{algorithm}-s{s:g}"


def cmd_run(args) -> int:
    config = _load(args)
    output_dir = Path(config.output_dir)
    digest = config_digest(config)
    digest_path = output_dir / DIGEST_FILE
    if not args.force and digest_path.exists() and digest_path.read_text().strip() == digest:
        report_path = output_dir / REPORT_JSON
        if report_path.exists():
            with open(report_path) as f:
                status = json.load(f).get("status")
            logger.info("%s is up to date for config %s; use --force to recompute", output_dir, digest[:12])
            return 0 if status == "ok" else 1
    model = ModelSpec.from_config(config.model)
    train_set, test_set = load_dataset(config.data)
    report = run_regime_suite(
        model, train_set, test_set, config,
        checkpoint_dir=output_dir / "checkpoints",
        progress=_progress_enabled(args),
    )
    report.write(output_dir)
    digest_path.write_text(digest + "\n")
    print_summary(aggregate(report.raw_frame()))
    if report.failed_cells:
        logger.warning("%d of %d cells failed", len(report.failed_cells), len(report.rows))
        return 1
    return 0


def cmd_pretrain(args) -> int:
    session = Session(_load(args), args.seed)
    config = session.config
    theta_0 = init_params(session.model, session.seed, config.precision)
    theta_0_prime = init_params(session.model, reinit_seed(session.seed), config.precision, purpose="reinit")
    theta_T, snapshots = pretrain(
        session.model, theta_0, session.train_set, session.train_config("pretrain"),
        eval_dataset=session.test_set, progress=_progress_enabled(args),
    )
    session.save("theta0", params=theta_0, epoch=0)
    session.save("theta0prime", params=theta_0_prime, epoch=0)
    session.save("thetaT", params=theta_T, epoch=config.train.epochs)
    for k, snap in snapshots.items():
        session.save(f"theta_k{k}", params=snap, epoch=k)
    print(json.dumps({"stage": "pretrain", "seed": session.seed, "accuracy": accuracy(session.model, theta_T, session.test_set)}))
    return 0


def cmd_prune(args) -> int:
    session = Session(_load(args), args.seed)
    theta_0 = session.load("theta0", "pretrain").params
    theta_T = session.load("thetaT", "pretrain").params
    prune_config = replace(session.config.prune, algorithm=args.alg, target_sparsity=args.sparsity)
    mask = generate_mask(
        session.model, session.train_set, theta_0, theta_T, session.train_config("pretrain"), prune_config
    )
    session.save(session.mask_name(args.alg, args.sparsity), mask=mask, provenance=f"mask-{args.alg}")
    print(json.dumps({
        "stage": "prune",
        "algorithm": args.alg,
        "sparsity": sparsity(mask),
        "per_layer_sparsity": dict(zip(mask.names, per_layer_sparsity(mask))),
        "mask_epochs": mask.metadata.get("mask_epochs"),
    }))
    return 0


def cmd_sparse_train(args) -> int:
    session = Session(_load(args), args.seed)
    mask = session.load(session.mask_name(args.alg, args.sparsity), "prune").mask
    regime, start_name = START_NAMES[args.start]
    train_config = session.train_config(regime, args.sparsity)
    if args.start == "rewind":
        k = session.config.train.rewind_epoch
        if k is None:
            raise ConfigurationError("--start rewind needs train.rewind_epoch")
        start = session.load(f"theta_k{k}", "pretrain").params
        params = rewind_train(session.model, start, mask, session.train_set, train_config)
    else:
        start = session.load(start_name, "pretrain").params
        params = sparse_train(session.model, start, mask, session.train_set, train_config)
    return _finish(session, regime, args, params, mask)


def cmd_finetune(args) -> int:
    session = Session(_load(args), args.seed)
    mask = session.load(session.mask_name(args.alg, args.sparsity), "prune").mask
    theta_T = session.load("thetaT", "pretrain").params
    params = prune_and_finetune(
        session.model, theta_T, mask, session.train_set, session.train_config("finetune", args.sparsity)
    )
    return _finish(session, "finetune", args, params, mask)


def _finish(session: Session, regime: str, args, params, mask) -> int:
    session.save(f"{regime}-{args.alg}-s{args.sparsity:g}", params=params, mask=mask)
    print(json.dumps({
        "stage": regime,
        "algorithm": args.alg,
        "sparsity": args.sparsity,
        "accuracy": accuracy(session.model, params, session.test_set),
    }))
    return 0


def cmd_correlate(args) -> int:
    session = Session(_load(args), args.seed)
    a = session.load(args.a, _producer(args.a)).params
    b = session.load(args.b, _producer(args.b)).params
    mask = None
    if args.mask is not None:
        mask = session.load(args.mask, "prune").mask
    elif args.scenario != "dense_dense":
        raise ConfigurationError(f"the {args.scenario} scenario needs --mask")
    if mask is not None and args.scenario == "sparse_sparse":
        a, b = apply_mask(a, mask), apply_mask(b, mask)
    report = correlation_report(
        a, b, parse_p_grid(args.p), args.scenario, mask,
        null_trials=session.config.null_trials, seed=session.seed, labels=(args.a, args.b),
    )
    rows = report.to_rows()
    out = session.dir / f"correlate-{args.a}-{args.b}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as f:
        f.write(json.dumps(rows, indent=2) + "\n")
    print(json.dumps(rows, indent=2))
    return 0


def _producer(name: str) -> str:
    if name.startswith("mask-"):
        return "prune"
    if name.startswith(("ticket-", "reinit-", "rewind-")):
        return "sparse-train"
    if name.startswith("finetune-"):
        return "finetune"
    return "pretrain"


def cmd_report(args) -> int:
    raw = read_raw(args.raw)
    aggregates = aggregate(raw)
    out = Path(args.out) if args.out else Path(args.raw).with_name(AGGREGATE_CSV)
    aggregates.to_csv(out, **CSV_OPTIONS)
    print_summary(aggregates)
    failed = int((raw["status"] != "ok").sum())
    if failed:
        logger.warning("%d failed cells in %s", failed, args.raw)
    return 1 if failed else 0


def _load(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "workers", None) is not None:
        overrides.append(f"workers={args.workers}")
    if getattr(args, "precision", None) is not None:
        overrides.append(f"precision={args.precision}")
    if getattr(args, "output_dir", None) is not None:
        overrides.append(f"output_dir={args.output_dir}")
    return load_config(args.config, overrides)


def _progress_enabled(args) -> bool:
    return sys.stderr.isatty() and not args.quiet


def build_parser() -> ArgumentParser:
    argp = ArgumentParser(prog="ticketlab", description="Lottery-ticket sparse-training experiments at desk scale.")
    argp.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level (per-epoch losses).")
    argp.add_argument("-q", "--quiet", action="store_true", help="Log warnings and errors only.")
    sub = argp.add_subparsers(dest="command", required=True)

    def with_config(parser):
        parser.add_argument("--config", type=str, required=True, help="YAML or JSON experiment config.")
        parser.add_argument("--set", type=str, nargs="*", metavar="KEY=VALUE", help="Dotted config overrides, e.g. train.lr0=0.01")
        parser.add_argument("--precision", type=str, choices=["f32", "f64"])
        parser.add_argument("--output_dir", type=str)
        return parser

    def with_stage(parser):
        with_config(parser)
        parser.add_argument("--seed", type=int, help="Seed of the stage artifacts (default: first config seed).")
        return parser

    def with_mask(parser):
        parser.add_argument("--alg", type=str, required=True, choices=ALGORITHMS)
        parser.add_argument("--sparsity", type=float, required=True)
        return parser

    run = with_config(sub.add_parser("run", help="Run the full regime suite and write reports."))
    run.add_argument("--force", action="store_true", help="Recompute even if the config digest matches.")
    run.add_argument("--workers", type=int)
    run.set_defaults(func=cmd_run)

    with_stage(sub.add_parser("pretrain", help="Draw θ₀, θ₀′ and train θ_T.")).set_defaults(func=cmd_pretrain)
    with_mask(with_stage(sub.add_parser("prune", help="Generate a mask from θ₀/θ_T."))).set_defaults(func=cmd_prune)

    sparse = with_mask(with_stage(sub.add_parser("sparse-train", help="Train a masked network from θ₀, θ₀′ or θₖ.")))
    sparse.add_argument("--start", type=str, default="theta0", choices=sorted(START_NAMES))
    sparse.set_defaults(func=cmd_sparse_train)

    with_mask(with_stage(sub.add_parser("finetune", help="Fine-tune θ_T⊙m."))).set_defaults(func=cmd_finetune)

    correlate = with_stage(sub.add_parser("correlate", help="R_p between two stored checkpoints."))
    correlate.add_argument("--a", type=str, required=True, help="Checkpoint name, e.g. theta0")
    correlate.add_argument("--b", type=str, required=True, help="Checkpoint name, e.g. thetaT")
    correlate.add_argument("--p", type=str, default="0.1..0.5")
    correlate.add_argument("--scenario", type=str, default="dense_dense", choices=SCENARIOS)
    correlate.add_argument("--mask", type=str, help="Mask checkpoint name for the sparse scenarios.")
    correlate.set_defaults(func=cmd_correlate)

    report = sub.add_parser("report", help="Rebuild the aggregate CSV from a raw CSV and print a summary.")
    report.add_argument("--raw", type=str, required=True)
    report.add_argument("--out", type=str)
    report.set_defaults(func=cmd_report)
    return argp


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        return args.func(args)
    except (DependencyError, IdxError, CheckpointError, OSError) as e:
        logger.error("%s", e)
        return 3
    except (ConfigurationError, CongruenceError) as e:
        logger.error("invalid configuration: %s", e)
        return 2
    except LabError as e:
        logger.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
