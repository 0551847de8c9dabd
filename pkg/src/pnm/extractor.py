"""
CSV extractor for PNM telemetry, tickets and evaluation artifacts

Every reader validates the exact header, parses fields strictly and reports
the first bad row by its 1-based file line (header = line 1).
"""

import math
import re
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from .diagnose import Diagnosis
from .errors import MalformedRow, UnknownChannel, UnknownKind
from .model import ChannelSeries, Feature, FNodeDataset, Label, TelemetrySeries, Ticket, TicketKind
from .synth import FaultEvent, GroundTruth

PathLike = Union[str, Path]

PNM_COLUMNS = ["ts", "device_id", "fnode_id", "channel", "snr_db", "tx_power_dbmv", "rx_power_dbmv"]
TICKET_COLUMNS = ["ticket_id", "device_id", "fnode_id", "open_ts", "close_ts", "kind", "dispatched"]
GROUND_TRUTH_COLUMNS = ["event_id", "fnode_id", "kind", "start_ts", "end_ts", "devices"]
MISSING_TRUTH_COLUMNS = ["device_id", "channel", "epoch_index"]
DIAGNOSIS_COLUMNS = ["fnode_id", "device_id", "start_ts", "end_ts", "label", "features", "cluster_id"]


def _line(offset: int) -> int:
    return offset + 2


def read_table(path: PathLike, columns: Sequence[str]) -> pd.DataFrame:
    """Read a CSV as strings, checking header and field counts."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError as e:
        raise MalformedRow(1, "missing header") from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise MalformedRow(int(match.group(1)) if match else 0, "unexpected field count") from e

    if list(frame.columns) != list(columns):
        raise MalformedRow(1, f"expected header {','.join(columns)}")
    short = frame.isna().any(axis=1).to_numpy()
    if short.any():
        raise MalformedRow(_line(int(np.argmax(short))), "missing fields")
    return frame


def _parse_column(frame: pd.DataFrame, column: str, parse: Callable[[str], object]) -> list:
    values = []
    for offset, raw in enumerate(frame[column]):
        try:
            values.append(parse(raw))
        except (TypeError, ValueError) as e:
            raise MalformedRow(_line(offset), f"{column}={raw!r}: {e}") from e
    return values


def _finite(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError("value must be finite")
    return value


def _non_empty(raw: str) -> str:
    if not raw:
        raise ValueError("value is empty")
    return raw


def ingest_pnm_csv(path: PathLike, interval_hours: float, n_channels: int) -> Dict[str, FNodeDataset]:
    """
    Load telemetry grouped by fNode / device / channel.

    Points are sorted by timestamp within each channel. Duplicates are kept;
    collapsing them is the preprocessing stage's job.
    """
    frame = read_table(path, PNM_COLUMNS)
    logger.info(f"📥 Reading {len(frame):,} telemetry rows from {path}")

    parsed = pd.DataFrame(
        {
            "ts": _parse_column(frame, "ts", _finite),
            "device_id": _parse_column(frame, "device_id", _non_empty),
            "fnode_id": _parse_column(frame, "fnode_id", _non_empty),
            "channel": _parse_column(frame, "channel", int),
            "snr": _parse_column(frame, "snr_db", _finite),
            "tx_power": _parse_column(frame, "tx_power_dbmv", _finite),
            "rx_power": _parse_column(frame, "rx_power_dbmv", _finite),
        }
    )
    if len(parsed):
        bad_ts = (parsed["ts"] < 0).to_numpy()
        if bad_ts.any():
            raise MalformedRow(_line(int(np.argmax(bad_ts))), "negative timestamp")
        bad_channel = (parsed["channel"] < 0).to_numpy()
        if bad_channel.any():
            raise MalformedRow(_line(int(np.argmax(bad_channel))), "negative channel")
        unknown = (parsed["channel"] >= n_channels).to_numpy()
        if unknown.any():
            offset = int(np.argmax(unknown))
            raise UnknownChannel(
                f"line {_line(offset)}: channel {parsed['channel'].iloc[offset]} but only {n_channels} configured"
            )

    parsed = parsed.sort_values(
        ["fnode_id", "device_id", "channel", "ts", "snr", "tx_power", "rx_power"], kind="mergesort"
    )
    datasets: Dict[str, FNodeDataset] = {}
    for fnode_id, fnode_rows in parsed.groupby("fnode_id", sort=True):
        devices: Dict[str, TelemetrySeries] = {}
        for device_id, device_rows in fnode_rows.groupby("device_id", sort=True):
            channels = {}
            for channel in range(n_channels):
                rows = device_rows[device_rows["channel"] == channel]
                channels[channel] = ChannelSeries(
                    channel,
                    rows["ts"].to_numpy(),
                    rows[["snr", "tx_power", "rx_power"]].to_numpy(),
                    np.zeros(len(rows), dtype=bool),
                )
            devices[device_id] = TelemetrySeries(device_id, fnode_id, channels)
        datasets[fnode_id] = FNodeDataset(fnode_id, devices, interval_hours, n_channels)

    logger.info(f"✅ Loaded {len(datasets)} fNodes, {sum(len(d.devices) for d in datasets.values())} devices")
    return datasets


def _kind(raw: str) -> TicketKind:
    try:
        return TicketKind(raw.strip().lower())
    except ValueError:
        raise UnknownKind(f"unknown ticket kind {raw!r}") from None


def _flag(raw: str) -> bool:
    if raw not in ("0", "1"):
        raise ValueError("expected 0 or 1")
    return raw == "1"


def _optional_ts(raw: str):
    return None if raw == "" else _finite(raw)


def ingest_tickets_csv(path: PathLike) -> List[Ticket]:
    frame = read_table(path, TICKET_COLUMNS)
    ids = _parse_column(frame, "ticket_id", _non_empty)
    devices = _parse_column(frame, "device_id", _non_empty)
    fnodes = _parse_column(frame, "fnode_id", _non_empty)
    opens = _parse_column(frame, "open_ts", _finite)
    closes = _parse_column(frame, "close_ts", _optional_ts)
    dispatched = _parse_column(frame, "dispatched", _flag)
    kinds = [_kind(raw) for raw in frame["kind"]]

    tickets = []
    for offset, row in enumerate(zip(ids, devices, fnodes, opens, closes, kinds, dispatched)):
        try:
            tickets.append(Ticket(*row))
        except ValueError as e:
            raise MalformedRow(_line(offset), str(e)) from e
    tickets.sort(key=lambda ticket: (ticket.open_ts, ticket.ticket_id))
    logger.info(f"🎫 Loaded {len(tickets)} tickets from {path}")
    return tickets


def ingest_ground_truth(path: PathLike, missing_path: Optional[PathLike] = None) -> GroundTruth:
    frame = read_table(path, GROUND_TRUTH_COLUMNS)
    starts = _parse_column(frame, "start_ts", _finite)
    ends = _parse_column(frame, "end_ts", _finite)
    kinds = [_kind(raw) for raw in frame["kind"]]
    events = tuple(
        FaultEvent(event_id, fnode_id, kind, start, end, frozenset(filter(None, members.split(";"))))
        for event_id, fnode_id, kind, start, end, members in zip(
            frame["event_id"], frame["fnode_id"], kinds, starts, ends, frame["devices"]
        )
    )
    missing = ingest_missing_truth(missing_path) if missing_path is not None else {}
    return GroundTruth(events, missing)


def ingest_missing_truth(path: PathLike) -> Dict[Tuple[str, int], frozenset]:
    frame = read_table(path, MISSING_TRUTH_COLUMNS)
    channels = _parse_column(frame, "channel", int)
    epochs = _parse_column(frame, "epoch_index", int)
    grouped: Dict[Tuple[str, int], set] = {}
    for device_id, channel, epoch in zip(frame["device_id"], channels, epochs):
        grouped.setdefault((device_id, channel), set()).add(epoch)
    return {key: frozenset(values) for key, values in grouped.items()}


def _cluster_ids(raw: str) -> Dict[Feature, int]:
    result = {}
    for item in filter(None, raw.split(";")):
        name, _, value = item.partition(":")
        result[Feature(name)] = int(value)
    return result


def ingest_diagnosis_csv(path: PathLike) -> List[Diagnosis]:
    frame = read_table(path, DIAGNOSIS_COLUMNS)
    starts = _parse_column(frame, "start_ts", _finite)
    ends = _parse_column(frame, "end_ts", _finite)
    labels = _parse_column(frame, "label", Label)
    features = _parse_column(frame, "features", lambda raw: frozenset(Feature(f) for f in filter(None, raw.split(";"))))
    clusters = _parse_column(frame, "cluster_id", _cluster_ids)
    return [
        Diagnosis(fnode_id, device_id, start, end, label, feature_set, cluster_ids)
        for fnode_id, device_id, start, end, label, feature_set, cluster_ids in zip(
            frame["fnode_id"], frame["device_id"], starts, ends, labels, features, clusters
        )
    ]
