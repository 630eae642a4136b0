"""Synthetic building loads with grouped daily profiles."""

from __future__ import annotations

import numpy as np
import pandas as pd


def make_loads(
    n_series: int = 8,
    n_groups: int = 2,
    days: int = 40,
    noise: float = 0.1,
    seed: int = 0,
    start: str = "2016-01-04",
    temperature: bool = False,
) -> pd.DataFrame:
    """Hourly wide frame: one column per meter, ``b00``, ``b01``, ...

    Meters in a group share a daily shape (phase and harmonic mix) and
    differ in scale; AR(1) noise is added on top. With ``temperature`` an
    extra ``temp`` column correlated with the daily cycle is appended.
    """
    rng = np.random.default_rng(seed)
    hours = days * 24
    t = np.arange(hours)
    index = pd.date_range(start, periods=hours, freq="h")
    shapes = []
    for g in range(n_groups):
        phase = 2 * np.pi * g / max(n_groups, 1)
        daily = np.sin(2 * np.pi * t / 24 + phase) + 0.5 * np.sin(4 * np.pi * t / 24 + 2 * phase)
        weekly = 0.3 * np.sin(2 * np.pi * t / 168 + phase)
        shapes.append(daily + weekly)
    data = {}
    for i in range(n_series):
        scale = rng.uniform(1.0, 3.0)
        eps = rng.normal(0.0, noise, hours)
        ar = np.empty(hours)
        ar[0] = eps[0]
        for k in range(1, hours):
            ar[k] = 0.6 * ar[k - 1] + eps[k]
        data[f"b{i:02d}"] = 5.0 + scale * (shapes[i % n_groups] + ar)
    if temperature:
        data["temp"] = 10 + 5 * np.sin(2 * np.pi * (t - 3) / 24) + rng.normal(0, 0.5, hours)
    return pd.DataFrame(data, index=index)


def write_long(frame: pd.DataFrame, path) -> None:
    long = frame.rename_axis("timestamp").reset_index().melt(
        id_vars="timestamp", var_name="series", value_name="value"
    )
    long["timestamp"] = long["timestamp"].dt.strftime("%Y-%m-%d %H:%M:%S")
    long[["series", "timestamp", "value"]].to_csv(path, index=False, float_format="%.17g")


def write_wide(frame: pd.DataFrame, path) -> None:
    out = frame.copy()
    out.index = out.index.strftime("%Y-%m-%d %H:%M:%S")
    out.rename_axis("timestamp").to_csv(path, float_format="%.17g")
