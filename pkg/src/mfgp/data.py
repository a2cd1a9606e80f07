"""Containers for paired low- and high-fidelity observation sets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

__all__ = ["FidelityDataset"]


def _as_float_1d(x, name: str) -> np.ndarray:
    arr = np.asarray(x, dtype=float).ravel()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass
class FidelityDataset:
    """Low-fidelity and high-fidelity observations with their locations.

    Points are (s1, s2, t) rows; ``lf_station`` / ``hf_station`` give the
    integer station index of each row. Rows generated by the simulator keep
    time varying fastest within each station.
    """

    lf_points: np.ndarray
    lf_values: np.ndarray
    hf_points: np.ndarray
    hf_values: np.ndarray
    lf_station: np.ndarray = field(default=None)
    hf_station: np.ndarray = field(default=None)
    station_labels: dict = field(default=None, repr=False)

    def __post_init__(self):
        self.lf_points = np.atleast_2d(np.asarray(self.lf_points, dtype=float))
        self.hf_points = np.atleast_2d(np.asarray(self.hf_points, dtype=float))
        self.lf_values = _as_float_1d(self.lf_values, "lf_values")
        self.hf_values = _as_float_1d(self.hf_values, "hf_values")
        for name, pts, vals in (
            ("lf", self.lf_points, self.lf_values),
            ("hf", self.hf_points, self.hf_values),
        ):
            if pts.ndim != 2 or pts.shape[1] != 3:
                raise ValueError(f"{name}_points must have shape (n, 3), got {pts.shape}")
            if pts.shape[0] == 0:
                raise ValueError(f"{name} observations must be nonempty")
            if pts.shape[0] != vals.shape[0]:
                raise ValueError(f"{name} points/values length mismatch")
            if not np.all(np.isfinite(pts)):
                raise ValueError(f"{name}_points contain non-finite coordinates")
        if self.lf_station is None:
            self.lf_station = np.zeros(self.n_lf, dtype=int)
        else:
            self.lf_station = np.asarray(self.lf_station, dtype=int).ravel()
        if self.hf_station is None:
            self.hf_station = np.zeros(self.n_hf, dtype=int)
        else:
            self.hf_station = np.asarray(self.hf_station, dtype=int).ravel()
        if self.lf_station.shape[0] != self.n_lf or self.hf_station.shape[0] != self.n_hf:
            raise ValueError("station index length mismatch")

    @property
    def n_lf(self) -> int:
        return self.lf_points.shape[0]

    @property
    def n_hf(self) -> int:
        return self.hf_points.shape[0]

    @property
    def lf_times(self) -> np.ndarray:
        return self.lf_points[:, 2]

    @property
    def hf_times(self) -> np.ndarray:
        return self.hf_points[:, 2]

    def sq_dists(self) -> dict:
        """Cached per-axis squared distances for the ll / lh / hh block pairs.

        Points are treated as immutable, so the cache stays valid and is
        shared by value-only copies (contaminated variants of a dataset).
        """
        cache = self.__dict__.get("_sq_dists")
        if cache is None:
            def axes(a, b):
                return tuple((a[:, k : k + 1] - b[None, :, k]) ** 2 for k in range(3))

            cache = {
                "ll": axes(self.lf_points, self.lf_points),
                "lh": axes(self.lf_points, self.hf_points),
                "hh": axes(self.hf_points, self.hf_points),
            }
            self.__dict__["_sq_dists"] = cache
        return cache

    def with_lf_values(self, values: np.ndarray) -> "FidelityDataset":
        out = replace(self, lf_values=np.array(values, dtype=float, copy=True))
        if "_sq_dists" in self.__dict__:  # same locations, cache carries over
            out.__dict__["_sq_dists"] = self.__dict__["_sq_dists"]
        return out

    def select(self, lf_mask=None, hf_mask=None) -> "FidelityDataset":
        """Row subset by boolean masks (None keeps all rows of that fidelity)."""
        lf_mask = np.ones(self.n_lf, bool) if lf_mask is None else np.asarray(lf_mask, bool)
        hf_mask = np.ones(self.n_hf, bool) if hf_mask is None else np.asarray(hf_mask, bool)
        return FidelityDataset(
            lf_points=self.lf_points[lf_mask],
            lf_values=self.lf_values[lf_mask],
            hf_points=self.hf_points[hf_mask],
            hf_values=self.hf_values[hf_mask],
            lf_station=self.lf_station[lf_mask],
            hf_station=self.hf_station[hf_mask],
            station_labels=self.station_labels,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long-format view with one row per observation."""
        frames = []
        for tag, pts, vals, stn in (
            ("LF", self.lf_points, self.lf_values, self.lf_station),
            ("HF", self.hf_points, self.hf_values, self.hf_station),
        ):
            frames.append(
                pd.DataFrame(
                    {
                        "station": stn,
                        "s1": pts[:, 0],
                        "s2": pts[:, 1],
                        "t": pts[:, 2],
                        "value": vals,
                        "fidelity": tag,
                    }
                )
            )
        return pd.concat(frames, ignore_index=True)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "FidelityDataset":
        lf = frame[frame["fidelity"] == "LF"]
        hf = frame[frame["fidelity"] == "HF"]
        if len(lf) == 0 or len(hf) == 0:
            raise ValueError("frame must contain both LF and HF rows")
        return cls(
            lf_points=lf[["s1", "s2", "t"]].to_numpy(float),
            lf_values=lf["value"].to_numpy(float),
            hf_points=hf[["s1", "s2", "t"]].to_numpy(float),
            hf_values=hf["value"].to_numpy(float),
            lf_station=lf["station"].to_numpy(int),
            hf_station=hf["station"].to_numpy(int),
        )
