from __future__ import annotations

import json
import logging
import math
import platform
from dataclasses import asdict
from importlib import metadata
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import pandas as pd

from msalab.config import RunConfig, dump_config, load_config
from msalab.experiments import EstimateReport, ProbeResult
from msalab.msa import RecursionLedger, RecursionRecord

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = ["probe", "L", "n", "h", "E_or_grid", "estimate", "ci_lo", "ci_hi", "trials", "seed"]
CURVE_COLUMNS = ["series", "x", "y"]
LEDGER_COLUMNS = [
    "source", "k", "n", "L_k", "L_next", "P_k", "Q_next", "S_next",
    "rhs_bound", "target", "P_next", "P_next_ci_lo", "holds",
]

CONFIG_FILE = "config.yaml"
SUMMARY_FILE = "summary.csv"
LEDGER_FILE = "ledger.csv"
METADATA_FILE = "metadata.json"


def trials_file(probe: str) -> str:
    return f"trials_{probe}.jsonl"


def curves_file(probe: str) -> str:
    return f"curves_{probe}.csv"


def _plain(value: Any) -> Any:
    """JSON-safe version of numpy scalars, arrays, tuples and non-finite floats."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_plain(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return value


# =========================
# Writers
# =========================

def write_config(config: RunConfig, out_dir: Path) -> Path:
    path = out_dir / CONFIG_FILE
    path.write_text(dump_config(config), encoding="utf-8")
    return path


def write_trials(records: Iterable[dict], path: Path) -> int:
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(_plain(record), sort_keys=True) + "\n")
            count += 1
    return count


def write_summary(reports: Iterable[EstimateReport], path: Path) -> pd.DataFrame:
    frame = pd.DataFrame([r.summary_row() for r in reports], columns=SUMMARY_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")
    return frame


def write_curves(curves: Iterable[tuple[str, float, float]], path: Path) -> pd.DataFrame:
    frame = pd.DataFrame(list(curves), columns=CURVE_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")
    return frame


def ledger_rows(ledger: RecursionLedger) -> list[dict]:
    rows = []
    for record in ledger.records:
        row = asdict(record)
        row["holds"] = record.holds
        rows.append(row)
    return rows


def write_ledger(ledger: RecursionLedger, path: Path) -> pd.DataFrame:
    frame = pd.DataFrame(ledger_rows(ledger), columns=LEDGER_COLUMNS)
    frame.to_csv(path, index=False, lineterminator="\n")
    return frame


def _version(package: str) -> str:
    try:
        return metadata.version(package)
    except metadata.PackageNotFoundError:
        return "unknown"


def write_metadata(path: Path, started_at: str, finished_at: str, elapsed: float, exit_code: int,
                   failures: list[str]) -> dict:
    """The only file of a run directory that changes between identical reruns."""
    payload = {
        "started_at": started_at,
        "finished_at": finished_at,
        "elapsed_sec": round(elapsed, 3),
        "exit_code": exit_code,
        "failures": failures,
        "python": platform.python_version(),
        "packages": {p: _version(p) for p in ("numpy", "scipy", "statsmodels", "pandas", "pydantic", "click")},
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return payload


def write_result(result: ProbeResult, out_dir: Path) -> list[Path]:
    """Trial log, summary rows, curves and ledger of one probe; returns the files written."""
    written = []
    path = out_dir / trials_file(result.probe)
    write_trials(result.trial_records, path)
    written.append(path)

    path = out_dir / SUMMARY_FILE
    write_summary(result.reports, path)
    written.append(path)

    if result.curves:
        path = out_dir / curves_file(result.probe)
        write_curves(result.curves, path)
        written.append(path)
    if result.ledger is not None:
        path = out_dir / LEDGER_FILE
        write_ledger(result.ledger, path)
        written.append(path)
    logger.info("Wrote outputs: probe=%s dir=%s files=%s", result.probe, out_dir, len(written))
    return written


# =========================
# Readers
# =========================

def read_config(out_dir: Path) -> RunConfig:
    return load_config(out_dir / CONFIG_FILE)


def read_trials(path: Path) -> list[dict]:
    with path.open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_summary(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, keep_default_na=False, dtype={"E_or_grid": str})


def read_curves(path: Path) -> pd.DataFrame:
    return pd.read_csv(path)


def read_ledger(path: Path) -> RecursionLedger:
    frame = pd.read_csv(path)
    records = []
    for row in frame.to_dict(orient="records"):
        row.pop("holds", None)
        for key in ("P_next", "P_next_ci_lo"):
            if pd.isna(row[key]):
                row[key] = None
        for key in ("k", "n", "L_k", "L_next"):
            row[key] = int(row[key])
        records.append(RecursionRecord(**row))
    return RecursionLedger(tuple(records))


def read_metadata(path: Path) -> dict:
    return json.loads(path.read_text(encoding="utf-8"))
