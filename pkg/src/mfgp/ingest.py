"""Station CSV ingestion and nearest-neighbour LF sensor selection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .data import FidelityDataset

__all__ = [
    "StationRecord",
    "ColumnMapping",
    "IngestQuality",
    "IngestResult",
    "read_station_csv",
    "nearest_lf_selection",
]

SENTINEL_VALUE = 999.9  # known low-cost sensor saturation reading


@dataclass(frozen=True)
class StationRecord:
    """One parsed observation row."""

    station_id: str
    lon: float
    lat: float
    day: float
    value: float
    fidelity: str


@dataclass(frozen=True)
class ColumnMapping:
    """Maps the required fields onto the CSV's column names."""

    station_id: str = "station_id"
    lon: str = "lon"
    lat: str = "lat"
    timestamp: str = "timestamp"
    value: str = "value"
    fidelity: str = "fidelity"
    hf_marker: str = "HF"
    lf_marker: str = "LF"


@dataclass
class IngestQuality:
    n_rows: int
    n_valid: int
    n_skipped: int
    n_sentinel: int
    sentinel_threshold: float = SENTINEL_VALUE


@dataclass
class IngestResult:
    dataset: FidelityDataset
    quality: IngestQuality
    stations: pd.DataFrame  # station, label, lon, lat, fidelity
    day_origin: Optional[pd.Timestamp] = None


def _normalise_days(ts: pd.Series):
    """Timestamps to a day index; numeric columns pass through unchanged."""
    numeric = pd.to_numeric(ts, errors="coerce")
    if numeric.notna().all():
        return numeric.astype(float), None
    parsed = pd.to_datetime(ts, errors="coerce", utc=True, format="mixed")
    origin = parsed.min()
    days = (parsed - origin).dt.total_seconds() / 86_400.0
    return days.astype(float), origin


def read_station_csv(
    path,
    mapping: ColumnMapping = ColumnMapping(),
    bbox: Optional[Sequence[float]] = None,
    daily_mean: bool = False,
    prefilter_max: Optional[float] = None,
) -> IngestResult:
    """Parse a station observation CSV into a FidelityDataset.

    Malformed rows (unparseable value/coordinates/timestamp, unknown fidelity
    marker) are skipped and counted. Sentinel extremes (>= 999.9) are kept --
    the robust fit is expected to cope with uncleaned data -- but counted in
    the quality report; ``prefilter_max`` drops values above a cutoff for
    ablation runs.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = pd.read_csv(path)
    required = [mapping.station_id, mapping.lon, mapping.lat, mapping.timestamp, mapping.value, mapping.fidelity]
    missing = [c for c in required if c not in raw.columns]
    if missing:
        raise ValueError(f"missing required columns {missing}; available: {list(raw.columns)}")

    frame = pd.DataFrame(
        {
            "label": raw[mapping.station_id].astype(str),
            "lon": pd.to_numeric(raw[mapping.lon], errors="coerce"),
            "lat": pd.to_numeric(raw[mapping.lat], errors="coerce"),
            "value": pd.to_numeric(raw[mapping.value], errors="coerce"),
            "fidelity": raw[mapping.fidelity].astype(str).str.strip().str.upper(),
        }
    )
    frame["day"], origin = _normalise_days(raw[mapping.timestamp])

    n_rows = len(frame)
    markers = {mapping.hf_marker.upper(): "HF", mapping.lf_marker.upper(): "LF"}
    frame["fidelity"] = frame["fidelity"].map(markers)
    valid = frame[["lon", "lat", "value", "day"]].notna().all(axis=1) & frame["fidelity"].notna()
    if bbox is not None:
        lon_min, lon_max, lat_min, lat_max = map(float, bbox)
        valid &= frame["lon"].between(lon_min, lon_max) & frame["lat"].between(lat_min, lat_max)
    if prefilter_max is not None:
        valid &= frame["value"] <= float(prefilter_max)
    clean = frame[valid].copy()
    if len(clean) == 0:
        raise ValueError(f"{path}: no valid rows after parsing")
    n_sentinel = int((clean["value"] >= SENTINEL_VALUE).sum())

    if daily_mean:
        clean["day"] = np.floor(clean["day"])
        clean = (
            clean.groupby(["label", "fidelity", "day"], as_index=False)
            .agg({"lon": "first", "lat": "first", "value": "mean"})
        )

    labels = sorted(clean["label"].unique())
    code = {label: i for i, label in enumerate(labels)}
    clean["station"] = clean["label"].map(code)

    lf = clean[clean["fidelity"] == "LF"]
    hf = clean[clean["fidelity"] == "HF"]
    if len(lf) == 0 or len(hf) == 0:
        raise ValueError("need at least one valid row of each fidelity")

    def _points(part: pd.DataFrame) -> np.ndarray:
        return np.column_stack([part["lon"], part["lat"], part["day"]]).astype(float)

    dataset = FidelityDataset(
        lf_points=_points(lf),
        lf_values=lf["value"].to_numpy(float),
        hf_points=_points(hf),
        hf_values=hf["value"].to_numpy(float),
        lf_station=lf["station"].to_numpy(int),
        hf_station=hf["station"].to_numpy(int),
        station_labels={i: label for label, i in code.items()},
    )
    stations = (
        clean.groupby("station", as_index=False)
        .agg({"label": "first", "lon": "first", "lat": "first", "fidelity": "first"})
        .sort_values("station", ignore_index=True)
    )
    quality = IngestQuality(
        n_rows=n_rows,
        n_valid=len(clean) if not daily_mean else int(valid.sum()),
        n_skipped=n_rows - int(valid.sum()),
        n_sentinel=n_sentinel,
    )
    return IngestResult(dataset=dataset, quality=quality, stations=stations, day_origin=origin)


def nearest_lf_selection(hf_sites, lf_sites, k: int = 15):
    """Union of the k nearest LF sites around each HF site, deduplicated.

    Sites are (id, lon, lat) triples; distance is Euclidean in lon/lat with a
    deterministic tie-break on station id. Returns the sorted selected ids.
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    hf = list(hf_sites)
    lf = list(lf_sites)
    if not hf or not lf:
        raise ValueError("both site lists must be nonempty")
    lf_ids = np.array([s[0] for s in lf], dtype=object)
    lf_xy = np.array([[float(s[1]), float(s[2])] for s in lf])
    order_by_id = np.argsort(lf_ids.astype(str), kind="stable")

    selected = set()
    for _, lon, lat in hf:
        d = np.hypot(lf_xy[:, 0] - float(lon), lf_xy[:, 1] - float(lat))
        # stable sort over id-ordered sites -> ties broken by ascending id
        nearest = order_by_id[np.argsort(d[order_by_id], kind="stable")[:k]]
        selected.update(lf_ids[nearest].tolist())
    return sorted(selected, key=str)
