"""
CSV / JSON writers

Rows are written in a canonical order and floats with their shortest
round-trip repr, so reruns produce byte-identical files and every value reads
back bit-exactly.
"""

import json
from pathlib import Path
from typing import Iterable, List, Mapping, Sequence, Union

import pandas as pd
from loguru import logger

from .diagnose import Diagnosis
from .extractor import (
    DIAGNOSIS_COLUMNS,
    GROUND_TRUTH_COLUMNS,
    MISSING_TRUTH_COLUMNS,
    PNM_COLUMNS,
    TICKET_COLUMNS,
)
from .model import Feature, FNodeDataset, Ticket
from .synth import GroundTruth

PathLike = Union[str, Path]


def fmt(value: float) -> str:
    return repr(float(value))


def _write(rows: List[list], columns: Sequence[str], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows, columns=list(columns), dtype=str).to_csv(path, index=False, lineterminator="\n")
    logger.debug(f"💾 Wrote {len(rows):,} rows to {path}")
    return path


def write_pnm_csv(datasets: Mapping[str, FNodeDataset], path: PathLike) -> Path:
    """Observed points only; placeholders never reach disk."""
    rows = []
    for fnode_id in sorted(datasets):
        for device_id, series in datasets[fnode_id].devices.items():
            for channel in series.channels.values():
                observed = channel.observed()
                for ts, (snr, tx, rx) in zip(observed.ts, observed.values):
                    rows.append((ts, device_id, fnode_id, channel.channel, snr, tx, rx))
    rows.sort(key=lambda row: (row[2], row[1], row[0], row[3]))
    formatted = [[fmt(ts), device, fnode, str(ch), fmt(snr), fmt(tx), fmt(rx)] for ts, device, fnode, ch, snr, tx, rx in rows]
    return _write(formatted, PNM_COLUMNS, path)


def write_tickets_csv(tickets: Iterable[Ticket], path: PathLike) -> Path:
    rows = [
        [
            ticket.ticket_id,
            ticket.device_id,
            ticket.fnode_id,
            fmt(ticket.open_ts),
            "" if ticket.close_ts is None else fmt(ticket.close_ts),
            ticket.kind.value,
            "1" if ticket.dispatched else "0",
        ]
        for ticket in sorted(tickets, key=lambda t: (t.open_ts, t.ticket_id))
    ]
    return _write(rows, TICKET_COLUMNS, path)


def write_ground_truth_csv(truth: GroundTruth, path: PathLike) -> Path:
    rows = [
        [event.event_id, event.fnode_id, event.kind.value, fmt(event.start_ts), fmt(event.end_ts), ";".join(sorted(event.devices))]
        for event in sorted(truth.events, key=lambda e: (e.fnode_id, e.event_id))
    ]
    return _write(rows, GROUND_TRUTH_COLUMNS, path)


def write_missing_truth_csv(truth: GroundTruth, path: PathLike) -> Path:
    rows = [
        [device_id, str(channel), str(epoch)]
        for (device_id, channel) in sorted(truth.missing)
        for epoch in sorted(truth.missing[(device_id, channel)])
    ]
    return _write(rows, MISSING_TRUTH_COLUMNS, path)


def format_cluster_ids(cluster_ids: Mapping[Feature, int]) -> str:
    return ";".join(f"{feature.value}:{cluster_ids[feature]}" for feature in Feature if feature in cluster_ids)


def write_diagnosis_csv(timeline: Iterable[Diagnosis], path: PathLike) -> Path:
    rows = [
        [
            d.fnode_id,
            d.device_id,
            fmt(d.start_ts),
            fmt(d.end_ts),
            d.label.value,
            ";".join(feature.value for feature in Feature if feature in d.features),
            format_cluster_ids(d.cluster_ids),
        ]
        for d in sorted(timeline, key=lambda d: (d.fnode_id, d.device_id, d.start_ts))
    ]
    return _write(rows, DIAGNOSIS_COLUMNS, path)


def write_cdf_csv(values: Iterable[float], path: PathLike) -> Path:
    ordered = sorted(float(v) for v in values)
    n = len(ordered)
    rows = [[fmt(value), fmt((rank + 1) / n)] for rank, value in enumerate(ordered)]
    return _write(rows, ["value", "cdf"], path)


def write_json(payload: Mapping, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")
    logger.debug(f"💾 Wrote {path}")
    return path
