"""Experiment reports: raw per-cell rows, seed aggregates, correlations and verdicts.

The raw CSV is the source of truth; the aggregate CSV is recomputed from it with
`aggregate`, so `report` can rebuild aggregates from any raw file.
"""

import json
import logging
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np
import pandas as pd

from .correlation import CorrelationReport
from .regimes import evaluate_winning_property

logger = logging.getLogger(__name__)

RAW_COLUMNS = [
    "config_digest",
    "lr0",
    "seed",
    "algorithm",
    "sparsity",
    "regime",
    "status",
    "accuracy",
    "train_seed",
    "mask_epochs",
    "r_start",
    "r_theta0_masked",
    "r_reinit_masked",
    "r_theta0",
    "r_thetaT",
    "aspect1",
    "aspect2",
    "winning",
    "error",
]
GROUP_KEYS = ["lr0", "algorithm", "sparsity", "regime"]
AGGREGATED = ["accuracy", "r_start", "r_theta0_masked", "r_reinit_masked", "r_theta0", "r_thetaT"]
CORRELATION_COLUMNS = [
    "config_digest",
    "lr0",
    "seed",
    "algorithm",
    "sparsity",
    "scenario",
    "a",
    "b",
    "p",
    "r_p",
    "null_mean",
    "null_low",
    "null_high",
    "intersections",
    "set_sizes",
    "domain_sizes",
]
REGIME_ORDER = {"pretrain": 0, "ticket": 1, "reinit": 2, "rewind": 3, "finetune": 4}

# CSV emission settings that keep files byte-stable across runs
CSV_OPTIONS = {"index": False, "lineterminator": "\n", "float_format": "%.10g", "na_rep": ""}

RAW_CSV = "raw.csv"
AGGREGATE_CSV = "aggregate.csv"
CORRELATION_CSV = "correlation.csv"
REPORT_JSON = "report.json"
DIGEST_FILE = "config.sha256"


def _sort_key(row: dict) -> tuple:
    return (
        row["lr0"],
        row["seed"],
        row["algorithm"],
        row["sparsity"],
        REGIME_ORDER.get(row["regime"], len(REGIME_ORDER)),
    )


def aggregate(raw: pd.DataFrame) -> pd.DataFrame:
    """Mean, sample std (ddof=1) and count over seeds per (lr0, algorithm, sparsity, regime).

    Failed cells are excluded.
    """
    ok = raw[raw["status"] == "ok"]
    columns = [c for c in AGGREGATED if c in ok.columns]
    if ok.empty:
        return pd.DataFrame(columns=GROUP_KEYS + ["n"] + [f"{c}_{s}" for c in columns for s in ("mean", "std")])
    grouped = ok.groupby(GROUP_KEYS, sort=True)[columns]
    stats = grouped.agg(["mean", "std"])
    stats.columns = [f"{c}_{s}" for c, s in stats.columns]
    stats.insert(0, "n", grouped.size())
    out = stats.reset_index()
    out["regime_order"] = out["regime"].map(REGIME_ORDER)
    out = out.sort_values(["lr0", "algorithm", "sparsity", "regime_order"], kind="stable").drop(columns="regime_order")
    return out.reset_index(drop=True)


def seed_mean_verdicts(raw: pd.DataFrame, epsilon: float, delta: float) -> list[dict]:
    """Winning-property verdicts on the seed means of dense, ticket and reinit accuracy."""
    ok = raw[raw["status"] == "ok"]
    dense = ok[ok["regime"] == "pretrain"].groupby("lr0")["accuracy"].mean()
    verdicts = []
    sparse = ok[ok["regime"].isin(["ticket", "reinit"])]
    for (lr0, algorithm, s), group in sparse.groupby(["lr0", "algorithm", "sparsity"], sort=True):
        means = group.groupby("regime")["accuracy"].mean()
        if lr0 not in dense.index or "ticket" not in means or "reinit" not in means:
            continue
        verdict = evaluate_winning_property(dense[lr0], means["ticket"], means["reinit"], epsilon, delta)
        verdicts.append(
            {
                "lr0": float(lr0),
                "algorithm": algorithm,
                "sparsity": float(s),
                "acc_dense": verdict.acc_dense,
                "acc_ticket": verdict.acc_ticket,
                "acc_reinit": verdict.acc_reinit,
                "aspect1": verdict.aspect1,
                "aspect2": verdict.aspect2,
                "winning": verdict.holds,
            }
        )
    return verdicts


def _json_value(value):
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return None if math.isnan(value) else value
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


class ExperimentReport:
    """Collects per-cell rows and correlation reports of one suite run.

    Attributes:
        config_digest: Digest of the resolved experiment config, stamped on every row.
        rows: One dict per cell (see `RAW_COLUMNS`), including failed cells.
        correlations: Long-form correlation rows (see `CORRELATION_COLUMNS`).
    """

    def __init__(self, config_digest: str, epsilon: float = 0.5, delta: float = 0.5, metadata: Optional[dict] = None):
        self.config_digest = config_digest
        self.epsilon = epsilon
        self.delta = delta
        self.metadata = metadata or {}
        self.rows = []
        self.correlations = []

    def add(self, row: dict) -> None:
        full = {column: None for column in RAW_COLUMNS}
        full.update(row)
        full["config_digest"] = self.config_digest
        self.rows.append(full)

    def add_correlation(self, report: CorrelationReport, **keys) -> None:
        for row in report.to_rows():
            full = {"config_digest": self.config_digest, **keys, **row}
            for column in ("intersections", "set_sizes", "domain_sizes"):
                full[column] = " ".join(str(x) for x in full[column])
            self.correlations.append(full)

    def sort(self) -> None:
        self.rows.sort(key=_sort_key)
        self.correlations.sort(key=lambda r: (r["lr0"], r["seed"], r["algorithm"], r["sparsity"], r["scenario"], r["a"], r["b"], r["p"]))

    @property
    def failed_cells(self) -> list[dict]:
        return [r for r in self.rows if r["status"] != "ok"]

    @property
    def status(self) -> str:
        return "failed" if self.failed_cells else "ok"

    def raw_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=RAW_COLUMNS)

    def correlation_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.correlations, columns=CORRELATION_COLUMNS)

    def process_scores(self) -> dict[str, Any]:
        """The JSON report: status, failed cells, aggregates and seed-mean verdicts."""
        raw = self.raw_frame()
        aggregates = aggregate(raw)
        return {
            "config_digest": self.config_digest,
            "status": self.status,
            "failed_cells": [
                {k: _json_value(r[k]) for k in ("lr0", "seed", "algorithm", "sparsity", "regime", "error")}
                for r in self.failed_cells
            ],
            "cells": len(self.rows),
            "aggregates": [{k: _json_value(v) for k, v in rec.items()} for rec in aggregates.to_dict("records")],
            "verdicts": seed_mean_verdicts(raw, self.epsilon, self.delta),
            "metadata": self.metadata,
        }

    def write(self, output_dir) -> dict[str, Path]:
        """Write raw, aggregate and correlation CSVs plus the JSON report."""
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        self.sort()
        paths = {
            "raw": output_dir / RAW_CSV,
            "aggregate": output_dir / AGGREGATE_CSV,
            "correlation": output_dir / CORRELATION_CSV,
            "report": output_dir / REPORT_JSON,
        }
        raw = self.raw_frame()
        raw.to_csv(paths["raw"], **CSV_OPTIONS)
        aggregate(raw).to_csv(paths["aggregate"], **CSV_OPTIONS)
        self.correlation_frame().to_csv(paths["correlation"], **CSV_OPTIONS)
        with open(paths["report"], "w") as f:
            f.write(json.dumps(self.process_scores(), indent=2, sort_keys=True) + "\n")
        logger.info("wrote %d rows to %s", len(raw), output_dir)
        return paths


def read_raw(path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=True, dtype={"algorithm": str, "regime": str, "status": str})


def print_summary(aggregates: pd.DataFrame, sep: str = " ") -> None:
    """Print a right-aligned accuracy table (mean ± std over seeds) for each cell."""
    headers = ["lr0", "algorithm", "sparsity", "regime", "n", "accuracy"]
    out_table = np.empty((len(aggregates) + 1, len(headers)), dtype=object)
    out_table[0] = headers
    for i, rec in enumerate(aggregates.to_dict("records")):
        std = rec.get("accuracy_std")
        acc = f"{100 * rec['accuracy_mean']:.2f}"
        if std is not None and not math.isnan(std):
            acc += f" ± {100 * std:.2f}"
        out_table[1 + i] = [f"{rec['lr0']:g}", rec["algorithm"], f"{rec['sparsity']:g}", rec["regime"], str(rec["n"]), acc]

    for i in range(len(headers)):
        width = max(len(cell) for cell in out_table[:, i])
        for j in range(len(out_table)):
            out_table[j, i] = out_table[j, i].rjust(width)

    for row in out_table:
        print(*row, sep=sep)
