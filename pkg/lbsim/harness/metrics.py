# lbsim/harness/metrics.py
"""
CSV schemas for step logs, episode aggregates and evaluation summaries.

metrics.csv   episode, step, policy, worker, t, mean_delay_ms, mlu,
              acceptance_rate, reward, cbf_modified, delay_<tunnel>...
episodes.csv  episode, policy, total_reward, mean_delay_ms, mean_mlu,
              min_acceptance, cbf_interventions
summary.csv   rank, policy, samples, mean/median/p95 delay, mean/max mlu,
              mean/min acceptance, mean_reward, cbf_modified_fraction,
              inference_seconds
"""
from __future__ import annotations

from pathlib import Path
from typing import List, Union

import pandas as pd

STEP_COLUMNS = ["episode", "step", "policy", "worker", "t", "mean_delay_ms", "mlu",
                "acceptance_rate", "reward", "cbf_modified"]

SUMMARY_COLUMNS = ["policy", "samples", "mean_delay_ms", "median_delay_ms", "p95_delay_ms",
                   "mean_mlu", "max_mlu", "mean_acceptance", "min_acceptance", "mean_reward",
                   "cbf_modified_fraction", "inference_seconds"]


def _ordered(df: pd.DataFrame, leading: List[str]) -> pd.DataFrame:
    head = [c for c in leading if c in df.columns]
    tail = [c for c in df.columns if c not in head]
    return df[head + tail]


def write_metrics(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _ordered(df, STEP_COLUMNS).to_csv(path, index=False)
    return path


def read_metrics(path: Union[str, Path]) -> pd.DataFrame:
    return pd.read_csv(path)


def write_summary(df: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _ordered(df, ["rank"] + SUMMARY_COLUMNS).to_csv(path, index=False)
    return path


def read_summary(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Missing summary csv: {path}")
    return pd.read_csv(path)
