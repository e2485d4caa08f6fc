"""Turns aligned MoCap/radar streams into supervised (window, spectrum) pairs.

Pipeline: fill marker gaps, resample MoCap onto the radar clock, slide a
shared (window, hop) over both streams, STFT the radar samples in two-sided
form at spectral-density scaling, center the zero-Doppler bin, and compress
with an elementwise square root. Row t of the resulting T x F spectrogram
is aligned with MoCap window t.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .streams import MoCapStream, RadarSignal

logger = logging.getLogger(__name__)

TAPERS = ("rect", "hann")


@dataclass(frozen=True)
class PreprocessConfig:
    """Shared windowing parameters for both streams.

    window is the segment length W in samples (and therefore also the
    number of two-sided frequency bins); hop is the stride H. Any window
    length works; power-of-two lengths take the fast FFT path.
    """

    window: int = 256
    hop: int = 64
    mocap_rate: float = 250.0
    radar_rate: float = 256.0
    taper: str = "rect"

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if not (1 <= self.hop <= self.window):
            raise ConfigError(f"hop must lie in [1, window], got hop={self.hop} window={self.window}")
        if self.mocap_rate <= 0 or self.radar_rate <= 0:
            raise ConfigError(
                f"rates must be positive, got mocap={self.mocap_rate} radar={self.radar_rate}"
            )
        if self.taper not in TAPERS:
            raise ConfigError(f"taper must be one of {TAPERS}, got {self.taper!r}")

    def to_dict(self) -> dict:
        return {
            "window": self.window,
            "hop": self.hop,
            "mocap_rate": self.mocap_rate,
            "radar_rate": self.radar_rate,
            "taper": self.taper,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**d)


@dataclass
class WindowedPairs:
    """Aligned training pairs: mocap (T, W, M, D) against spectra (T, F)."""

    mocap: np.ndarray
    spec: np.ndarray
    starts: np.ndarray
    config: PreprocessConfig

    def __post_init__(self):
        self.mocap = np.asarray(self.mocap, dtype=np.float64)
        self.spec = np.asarray(self.spec, dtype=np.float64)
        self.starts = np.asarray(self.starts, dtype=np.int64)
        if self.mocap.ndim != 4:
            raise ShapeError(f"mocap windows must be 4-d (T,W,M,D), got {self.mocap.shape}")
        if self.spec.ndim != 2:
            raise ShapeError(f"spectra must be 2-d (T,F), got {self.spec.shape}")
        t, w = self.mocap.shape[:2]
        if self.spec.shape[0] != t or len(self.starts) != t:
            raise ShapeError(
                f"window counts disagree: mocap T={t}, spec T={self.spec.shape[0]}, "
                f"starts T={len(self.starts)}"
            )
        if self.spec.shape[1] != w or w != self.config.window:
            raise ShapeError(
                f"bin count must equal window length: F={self.spec.shape[1]}, W={w}, "
                f"config W={self.config.window}"
            )
        if np.any(self.spec < 0):
            raise DataError("compressed spectra must be nonnegative")
        if not np.all(np.isfinite(self.mocap)):
            raise DataError("mocap windows contain NaN/Inf; run fill_gaps before pairing")

    @property
    def n_windows(self) -> int:
        return self.mocap.shape[0]


# -- segmentation --------------------------------------------------------------


def window_count(n: int, window: int, hop: int) -> int:
    """Number of full windows: floor((N - W) / H) + 1."""
    if n < window:
        raise DataError(f"stream of {n} samples is shorter than one window of {window}")
    return (n - window) // hop + 1


def segment_windows(values: np.ndarray, window: int, hop: int):
    """Slice a leading-time-axis array into (T, window, ...) segments.

    Segment t covers samples [t*hop, t*hop + window); the trailing remainder
    that does not fill a window is dropped.
    """
    values = np.asarray(values)
    count = window_count(values.shape[0], window, hop)
    starts = np.arange(count, dtype=np.int64) * hop
    segments = np.stack([values[s : s + window] for s in starts])
    return segments, starts


# -- mocap repairs and resampling ----------------------------------------------


def fill_gaps(stream: MoCapStream) -> MoCapStream:
    """Linearly interpolate NaN runs per channel; edge gaps hold the nearest
    valid value. A channel with no valid sample at all is unrecoverable."""
    if not stream.has_gaps():
        return stream
    x = stream.x.copy()
    n, m, d = x.shape
    filled = 0
    for j in range(m):
        for k in range(d):
            channel = x[:, j, k]
            good = np.isfinite(channel)
            if good.all():
                continue
            if not good.any():
                raise DataError(f"marker {j} channel {k} has no valid samples to fill from")
            bad = ~good
            channel[bad] = np.interp(stream.t[bad], stream.t[good], channel[good])
            filled += int(bad.sum())
    logger.info("gap fill: interpolated %d occluded samples", filled)
    return MoCapStream(stream.t, x, stream.marker_names)


def _interpolate_channels(stream: MoCapStream, times: np.ndarray) -> np.ndarray:
    if stream.has_gaps():
        raise DataError("stream has unfilled gaps; run fill_gaps before resampling")
    n, m, d = stream.x.shape
    flat = stream.x.reshape(n, m * d)
    out = np.empty((len(times), m * d))
    for c in range(m * d):
        out[:, c] = np.interp(times, stream.t, flat[:, c])
    return out.reshape(len(times), m, d)


def resample_linear(stream: MoCapStream, target_rate: float) -> MoCapStream:
    """Resample onto a uniform grid at target_rate spanning [t0, tN-1].

    The first output sample falls exactly on t0, so endpoint values are
    preserved; linear signals are reproduced exactly.
    """
    if target_rate <= 0:
        raise ConfigError(f"target rate must be positive, got {target_rate}")
    if stream.n_frames < 2:
        raise DataError(f"resampling needs at least 2 frames, got {stream.n_frames}")
    t0, t1 = stream.t[0], stream.t[-1]
    n_out = int(np.floor((t1 - t0) * target_rate)) + 1
    times = t0 + np.arange(n_out) / target_rate
    return MoCapStream(times, _interpolate_channels(stream, times), stream.marker_names)


# -- spectrogram ----------------------------------------------------------------


def taper_window(kind: str, length: int) -> np.ndarray:
    """Analysis window samples; 'hann' is the periodic variant."""
    if kind == "rect":
        return np.ones(length)
    if kind == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(length) / length)
    raise ConfigError(f"taper must be one of {TAPERS}, got {kind!r}")


def stft_density(iq: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Two-sided STFT scaled to spectral density, returned as (F, T) complex.

    Each column is the DFT of one tapered segment divided by
    sqrt(radar_rate * sum(w^2)), so the squared magnitudes integrate (bin
    width radar_rate/W) to the mean power of the tapered segment.
    """
    iq = np.asarray(iq, dtype=np.complex128)
    if iq.ndim != 1:
        raise ShapeError(f"iq samples must be 1-d, got shape {iq.shape}")
    w = taper_window(cfg.taper, cfg.window)
    segments, _ = segment_windows(iq, cfg.window, cfg.hop)
    spectra = np.fft.fft(segments * w, axis=1)
    scale = 1.0 / np.sqrt(cfg.radar_rate * np.sum(w * w))
    return (spectra * scale).T


def center_shift(spec: np.ndarray) -> np.ndarray:
    """Circularly rotate rows so zero frequency sits at row F//2."""
    return np.fft.fftshift(np.asarray(spec), axes=0)


def compress_sqrt(spec: np.ndarray) -> np.ndarray:
    """Elementwise sqrt(|.|): nonnegative, dynamic-range-compressed."""
    return np.sqrt(np.abs(np.asarray(spec)))


# -- pairing --------------------------------------------------------------------


def build_pairs(mocap: MoCapStream, radar: RadarSignal, cfg: PreprocessConfig) -> WindowedPairs:
    """Produce aligned (window, spectrum) pairs from streams on a common clock.

    MoCap is gap-filled and interpolated directly onto the radar's (uniform)
    timestamps inside the overlap, then both are segmented with the shared
    (window, hop); the spectrogram is transposed to T x F so row t matches
    MoCap window t.
    """
    filled = fill_gaps(mocap)
    if filled.n_frames < 2:
        raise DataError("mocap stream too short to interpolate")
    lo = max(filled.t[0], radar.t[0])
    hi = min(filled.t[-1], radar.t[-1])
    # W uniform samples span (W-1)/rate between their endpoints.
    needed = (cfg.window - 1) / cfg.radar_rate
    if hi - lo < needed:
        raise DataError(
            f"streams overlap for {max(hi - lo, 0.0):.6f} s but one window needs {needed:.6f} s"
        )
    inside = (radar.t >= filled.t[0]) & (radar.t <= filled.t[-1])
    times = radar.t[inside]
    iq = radar.iq[inside]
    if len(times) < cfg.window:
        raise DataError(
            f"only {len(times)} radar samples overlap the mocap span; need >= {cfg.window}"
        )

    positions = _interpolate_channels(filled, times)
    windows, starts = segment_windows(positions, cfg.window, cfg.hop)
    spec = stft_density(iq, cfg)
    spec = compress_sqrt(center_shift(spec)).T
    return WindowedPairs(mocap=windows, spec=spec, starts=starts, config=cfg)
