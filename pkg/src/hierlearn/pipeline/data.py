"""Ingestion, hourly resampling and gap cleaning of meter series."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

LONG_COLUMNS = ("series", "timestamp", "value")


class DataError(ValueError):
    pass


@dataclass
class SeriesTable:
    """Series on a shared time index, one column per label.

    Missing observations are NaN. ``dropped`` maps rejected labels to the
    reason they were removed.
    """

    frame: pd.DataFrame
    dropped: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return [str(c) for c in self.frame.columns]

    @property
    def index(self) -> pd.DatetimeIndex:
        return self.frame.index

    def __len__(self) -> int:
        return int(self.frame.notna().to_numpy().sum())

    def records(self) -> list[tuple]:
        long = self.to_long()
        return list(long.itertuples(index=False, name=None))

    def to_long(self) -> pd.DataFrame:
        long = self.frame.rename_axis("timestamp").reset_index().melt(
            id_vars="timestamp", var_name="series", value_name="value"
        )
        long = long.dropna(subset=["value"])
        return long[list(LONG_COLUMNS)].sort_values(["series", "timestamp"], kind="stable").reset_index(drop=True)

    def write_long(self, path) -> None:
        long = self.to_long()
        long["timestamp"] = long["timestamp"].dt.strftime("%Y-%m-%d %H:%M:%S")
        long.to_csv(path, index=False, float_format="%.17g")

    def values(self, labels=None) -> np.ndarray:
        cols = self.labels if labels is None else list(labels)
        return self.frame[cols].to_numpy(dtype=float)


def _read_rows(path: Path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row and any(x.strip() for x in row)]
    return header, rows


def _parse_time(text: str, line: int, path) -> pd.Timestamp:
    try:
        ts = pd.Timestamp(text.strip())
    except (ValueError, TypeError):
        raise DataError(f"{path}:{line}: cannot parse timestamp {text!r}") from None
    if ts is pd.NaT:
        raise DataError(f"{path}:{line}: cannot parse timestamp {text!r}")
    return ts


def _parse_value(text: str, line: int, path) -> float:
    text = text.strip()
    if text == "" or text.lower() in ("nan", "na", "null"):
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: cannot parse value {text!r}") from None


def ingest(path, format: str = "auto") -> SeriesTable:
    """Read a long (``series,timestamp,value``) or wide (timestamp + one column per series) CSV."""
    path = Path(path)
    header, rows = _read_rows(path)
    lowered = [h.lower() for h in header]
    if format == "auto":
        format = "long" if set(LONG_COLUMNS) <= set(lowered) else "wide"
    data: dict[str, dict] = {}
    if format == "long":
        try:
            i_s, i_t, i_v = (lowered.index(c) for c in LONG_COLUMNS)
        except ValueError:
            raise DataError(f"{path}: long format needs columns {LONG_COLUMNS}") from None
        for line, row in rows:
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            label = row[i_s].strip()
            ts = _parse_time(row[i_t], line, path)
            series = data.setdefault(label, {})
            if ts in series:
                raise DataError(f"{path}:{line}: duplicate timestamp {ts} for series {label!r}")
            series[ts] = _parse_value(row[i_v], line, path)
    elif format == "wide":
        labels = header[1:]
        if not labels or len(set(labels)) != len(labels):
            raise DataError(f"{path}: wide format needs unique series columns after the timestamp")
        for label in labels:
            data[label] = {}
        for line, row in rows:
            if len(row) != len(header):
                raise DataError(f"{path}:{line}: expected {len(header)} fields, got {len(row)}")
            ts = _parse_time(row[0], line, path)
            for label, cell in zip(labels, row[1:]):
                if ts in data[label]:
                    raise DataError(f"{path}:{line}: duplicate timestamp {ts} for series {label!r}")
                data[label][ts] = _parse_value(cell, line, path)
    else:
        raise DataError(f"unknown format {format!r}")
    frame = pd.DataFrame({k: pd.Series(v, dtype=float) for k, v in data.items()})
    frame.index = pd.DatetimeIndex(frame.index)
    frame = frame.sort_index()
    frame.columns = [str(c) for c in frame.columns]
    return SeriesTable(frame)


def resample(table: SeriesTable, freq: str = "h", how: str = "mean") -> SeriesTable:
    """Put every series on a regular grid; empty bins stay NaN."""
    if table.frame.empty:
        return table
    grouped = table.frame.resample(freq)
    frame = grouped.sum(min_count=1) if how == "sum" else grouped.mean()
    return SeriesTable(frame, dict(table.dropped))


def _runs(missing: np.ndarray) -> list[tuple[int, int]]:
    runs, start = [], None
    for i, flag in enumerate(missing):
        if flag and start is None:
            start = i
        elif not flag and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(missing)))
    return runs


def clean(
    table: SeriesTable,
    max_gap_hours: int = 2,
    window_hours: int = 8,
    gap_rule: str = "contiguous",
) -> SeriesTable:
    """Fill short gaps with a centered moving average and drop the rest.

    ``gap_rule="contiguous"`` rejects a series with any run of more than
    ``max_gap_hours`` missing hours; ``"total"`` rejects it when the missing
    hours add up to more than that.
    """
    if gap_rule not in ("contiguous", "total"):
        raise DataError(f"gap_rule must be 'contiguous' or 'total', got {gap_rule!r}")
    half = window_hours // 2
    kept, dropped = {}, dict(table.dropped)
    for label in table.labels:
        x = table.frame[label].to_numpy(dtype=float)
        missing = np.isnan(x)
        runs = _runs(missing)
        longest = max((b - a for a, b in runs), default=0)
        total = int(missing.sum())
        if total == len(x):
            dropped[label] = "no observations"
        elif gap_rule == "contiguous" and longest > max_gap_hours:
            dropped[label] = f"gap of {longest} hours exceeds {max_gap_hours}"
        elif gap_rule == "total" and total > max_gap_hours:
            dropped[label] = f"{total} missing hours exceed {max_gap_hours}"
        else:
            filled = x.copy()
            for i in np.flatnonzero(missing):
                window = x[max(0, i - half) : i + half + 1]
                window = window[~np.isnan(window)]
                if window.size == 0:
                    dropped[label] = f"no observations within {half} hours of a gap"
                    break
                filled[i] = window.mean()
            else:
                kept[label] = filled
                continue
        log.info("dropping series %s: %s", label, dropped[label])
    frame = pd.DataFrame(kept, index=table.index)
    return SeriesTable(frame, dropped)
