"""Typed containers for the two raw sensor streams."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class MoCapStream:
    """Marker trajectories: timestamps plus an (N, M, D) position array.

    Occluded samples are encoded as NaN until `dsp.fill_gaps` repairs them;
    every other invariant (monotonic time, matching extents) is enforced
    here.
    """

    t: np.ndarray
    x: np.ndarray
    marker_names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.t.ndim != 1:
            raise ShapeError(f"mocap timestamps must be 1-d, got shape {self.t.shape}")
        if self.x.ndim != 3:
            raise ShapeError(f"mocap positions must be (frames, markers, dims), got {self.x.shape}")
        if len(self.t) != self.x.shape[0]:
            raise ShapeError(f"{len(self.t)} timestamps for {self.x.shape[0]} frames")
        if len(self.t) > 1 and not np.all(np.diff(self.t) > 0):
            raise DataError("mocap timestamps must be strictly increasing")
        if not np.all(np.isfinite(self.t)):
            raise DataError("mocap timestamps must be finite")
        if self.marker_names is not None:
            self.marker_names = tuple(str(n) for n in self.marker_names)
            if len(self.marker_names) != self.x.shape[1]:
                raise ShapeError(
                    f"{len(self.marker_names)} marker names for {self.x.shape[1]} markers"
                )

    @property
    def n_frames(self) -> int:
        return self.x.shape[0]

    @property
    def n_markers(self) -> int:
        return self.x.shape[1]

    @property
    def dim(self) -> int:
        return self.x.shape[2]

    def has_gaps(self) -> bool:
        return bool(np.isnan(self.x).any())


@dataclass
class RadarSignal:
    """Complex baseband samples on a uniform clock (within 1 ppm)."""

    t: np.ndarray
    iq: np.ndarray
    carrier_hz: float = 5.8e9

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.iq = np.asarray(self.iq, dtype=np.complex128)
        if self.t.ndim != 1 or self.iq.ndim != 1:
            raise ShapeError("radar timestamps and samples must be 1-d")
        if len(self.t) != len(self.iq):
            raise ShapeError(f"{len(self.t)} timestamps for {len(self.iq)} samples")
        if not np.all(np.isfinite(self.t)):
            raise DataError("radar timestamps must be finite")
        if len(self.t) > 1:
            dt = np.diff(self.t)
            if not np.all(dt > 0):
                raise DataError("radar timestamps must be strictly increasing")
            med = float(np.median(dt))
            if np.max(np.abs(dt - med)) > 1e-6 * med:
                raise DataError("radar sample clock deviates from uniform by more than 1 ppm")
        if self.carrier_hz <= 0:
            raise DataError(f"carrier frequency must be positive, got {self.carrier_hz}")

    @property
    def n_samples(self) -> int:
        return len(self.iq)

    @property
    def rate(self) -> float:
        if len(self.t) < 2:
            raise DataError("cannot infer rate from fewer than 2 samples")
        return 1.0 / float(np.median(np.diff(self.t)))


@dataclass(frozen=True)
class SyncMark:
    """The shared epoch: the same physical instant on each device's clock."""

    mocap_time_s: float
    radar_time_s: float

    def __post_init__(self):
        if not (np.isfinite(self.mocap_time_s) and np.isfinite(self.radar_time_s)):
            raise DataError("sync times must be finite")
