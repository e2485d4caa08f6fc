"""File formats, stream alignment, and dataset persistence.

Text formats are comma-separated with one mandatory metadata header line;
floats are written with repr so finite values round-trip exactly. The pairs
container is a little-endian binary layout with a JSON header. All formats
are documented byte-for-byte in docs/formats.md. Loaders reject structurally
invalid input instead of repairing it; the only repair in the pipeline
(marker gap fill) lives in dsp and is logged there.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .dsp import PreprocessConfig, WindowedPairs
from .errors import ConfigError, DataError, FormatError, ParseError
from .streams import MoCapStream, RadarSignal, SyncMark

PAIRS_MAGIC = b"MCSPAIR1"
PAIRS_VERSION = 1


def _fmt(value: float) -> str:
    return repr(float(value))


def _parse_header(path, line: str, expected_kind: str) -> dict:
    fields = line.rstrip("\n").split(",")
    if not fields or fields[0] != expected_kind:
        raise ParseError(f"{path}:1: expected a {expected_kind!r} header, got {fields[0]!r}")
    meta = {}
    for field in fields[1:]:
        if "=" not in field:
            raise ParseError(f"{path}:1: malformed header field {field!r}")
        key, value = field.split("=", 1)
        meta[key] = value
    if meta.get("version") != "1":
        raise ParseError(f"{path}:1: unsupported version {meta.get('version')!r}")
    return meta


def _check_rate(path, declared: float, t: np.ndarray) -> None:
    if len(t) < 2:
        return
    median_dt = float(np.median(np.diff(t)))
    actual = 1.0 / median_dt
    if abs(actual - declared) > 1e-3 * declared:
        raise DataError(
            f"{path}: declared rate {declared} Hz but median timestamp step implies "
            f"{actual:.6f} Hz (tolerance 0.1%)"
        )


# -- mocap text format ------------------------------------------------------------


def save_mocap(stream: MoCapStream, path, rate_hz: float | None = None) -> None:
    """Write the mocap text format; NaN samples become empty fields."""
    names = stream.marker_names
    if names is None:
        names = tuple(f"m{i:02d}" for i in range(stream.n_markers))
    for name in names:
        if "," in name or "|" in name:
            raise DataError(f"marker name {name!r} may not contain ',' or '|'")
    if rate_hz is None:
        if stream.n_frames < 2:
            raise DataError("cannot infer rate from fewer than 2 frames; pass rate_hz")
        rate_hz = 1.0 / float(np.median(np.diff(stream.t)))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"mocap,version=1,rate_hz={_fmt(rate_hz)},units=m,markers={'|'.join(names)}\n")
        for i in range(stream.n_frames):
            cells = [str(i), _fmt(stream.t[i])]
            for value in stream.x[i].reshape(-1):
                cells.append("" if np.isnan(value) else _fmt(value))
            fh.write(",".join(cells) + "\n")


def load_mocap(path) -> MoCapStream:
    """Parse the mocap text format; empty coordinate fields become NaN gaps."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"mocap file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    meta = _parse_header(path, lines[0], "mocap")
    try:
        rate = float(meta["rate_hz"])
        names = tuple(meta["markers"].split("|"))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}:1: bad header: {exc}") from exc
    if meta.get("units", "m") != "m":
        raise ParseError(f"{path}:1: unsupported units {meta.get('units')!r}")
    n_markers = len(names)
    n_cols = 2 + 3 * n_markers

    times = []
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise ParseError(f"{path}:{lineno}: expected {n_cols} fields, got {len(cells)}")
        try:
            times.append(float(cells[1]))
            rows.append([float(c) if c != "" else np.nan for c in cells[2:]])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not rows:
        raise ParseError(f"{path}:2: no data rows")
    t = np.asarray(times)
    x = np.asarray(rows).reshape(len(rows), n_markers, 3)
    if len(t) > 1 and not np.all(np.diff(t) > 0):
        raise DataError(f"{path}: timestamps are not strictly increasing")
    _check_rate(path, rate, t)
    return MoCapStream(t, x, names)


# -- radar text format --------------------------------------------------------------


def save_radar(signal: RadarSignal, path, rate_hz: float | None = None) -> None:
    if rate_hz is None:
        rate_hz = signal.rate
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"radar,version=1,rate_hz={_fmt(rate_hz)},carrier_hz={_fmt(signal.carrier_hz)}\n")
        for i in range(signal.n_samples):
            fh.write(f"{_fmt(signal.t[i])},{_fmt(signal.iq[i].real)},{_fmt(signal.iq[i].imag)}\n")


def load_radar(path) -> RadarSignal:
    path = Path(path)
    if not path.exists():
        raise DataError(f"radar file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    meta = _parse_header(path, lines[0], "radar")
    try:
        rate = float(meta["rate_hz"])
        carrier = float(meta.get("carrier_hz", 5.8e9))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}:1: bad header: {exc}") from exc

    times = []
    iq = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        cells = line.split(",")
        if len(cells) != 3:
            raise ParseError(f"{path}:{lineno}: expected 3 fields, got {len(cells)}")
        try:
            times.append(float(cells[0]))
            iq.append(complex(float(cells[1]), float(cells[2])))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not iq:
        raise ParseError(f"{path}:2: no data rows")
    t = np.asarray(times)
    _check_rate(path, rate, t)
    return RadarSignal(t, np.asarray(iq), carrier_hz=carrier)  # uniformity checked on build


# -- alignment -----------------------------------------------------------------------


def align(mocap: MoCapStream, radar: RadarSignal, sync: SyncMark):
    """Shift both time axes so the sync mark is t=0 and crop to the overlap."""
    if not (mocap.t[0] <= sync.mocap_time_s <= mocap.t[-1]):
        raise DataError(
            f"mocap sync time {sync.mocap_time_s} outside span [{mocap.t[0]}, {mocap.t[-1]}]"
        )
    if not (radar.t[0] <= sync.radar_time_s <= radar.t[-1]):
        raise DataError(
            f"radar sync time {sync.radar_time_s} outside span [{radar.t[0]}, {radar.t[-1]}]"
        )
    mt = mocap.t - sync.mocap_time_s
    rt = radar.t - sync.radar_time_s
    lo = max(mt[0], rt[0])
    hi = min(mt[-1], rt[-1])
    if hi <= lo:
        raise DataError(f"streams do not overlap after alignment: [{lo}, {hi}]")
    mkeep = (mt >= lo) & (mt <= hi)
    rkeep = (rt >= lo) & (rt <= hi)
    if not mkeep.any() or not rkeep.any():
        raise DataError("no samples remain inside the overlap after alignment")
    return (
        MoCapStream(mt[mkeep], mocap.x[mkeep], mocap.marker_names),
        RadarSignal(rt[rkeep], radar.iq[rkeep], carrier_hz=radar.carrier_hz),
    )


# -- binary pairs container ------------------------------------------------------------


def save_pairs(pairs: WindowedPairs, path) -> None:
    """Write the pairs container (single-precision payload)."""
    t, w, m, d = pairs.mocap.shape
    if t == 0:
        raise DataError("refusing to save an empty pairs container (T=0)")
    header = {
        "format_version": PAIRS_VERSION,
        "t": t, "w": w, "m": m, "d": d, "f": pairs.spec.shape[1],
        "config": pairs.config.to_dict(),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(PAIRS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(pairs.starts, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(pairs.mocap, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(pairs.spec, dtype="<f4").tobytes())


def load_pairs(path) -> WindowedPairs:
    """Read a pairs container, validating the header against the byte count."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"pairs file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(PAIRS_MAGIC) + 4 or raw[: len(PAIRS_MAGIC)] != PAIRS_MAGIC:
        raise FormatError(f"{path}: not a pairs container (bad magic)")
    offset = len(PAIRS_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if offset + header_len > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    offset += header_len

    if header.get("format_version") != PAIRS_VERSION:
        raise FormatError(
            f"{path}: format version {header.get('format_version')} not supported"
        )
    try:
        t, w, m, d, f = (int(header[k]) for k in ("t", "w", "m", "d", "f"))
        config = PreprocessConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise FormatError(f"{path}: invalid header: {exc}") from exc
    if t < 1:
        raise FormatError(f"{path}: container declares T={t}")

    expected = offset + 8 * t + 4 * (t * w * m * d) + 4 * (t * f)
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - offset} bytes but header implies {expected - offset}"
        )
    starts = np.frombuffer(raw, dtype="<i8", count=t, offset=offset).copy()
    offset += 8 * t
    mocap = np.frombuffer(raw, dtype="<f4", count=t * w * m * d, offset=offset)
    mocap = mocap.reshape(t, w, m, d).astype(np.float64)
    offset += 4 * t * w * m * d
    spec = np.frombuffer(raw, dtype="<f4", count=t * f, offset=offset)
    spec = spec.reshape(t, f).astype(np.float64)
    return WindowedPairs(mocap=mocap, spec=spec, starts=starts, config=config)


# -- predicted spectrogram text format ---------------------------------------------------


def save_spectrogram(spec_tf: np.ndarray, path, hop: int, rate_hz: float) -> None:
    """Write a T x F real spectrogram with its timing metadata."""
    spec_tf = np.asarray(spec_tf, dtype=np.float64)
    if spec_tf.ndim != 2:
        raise DataError(f"spectrogram must be 2-d (T, F), got shape {spec_tf.shape}")
    t, f = spec_tf.shape
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"spectrogram,version=1,t={t},f={f},hop={int(hop)},rate_hz={_fmt(rate_hz)}\n"
        )
        for row in spec_tf:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def load_spectrogram(path):
    """Read the spectrogram text format; returns (T x F array, metadata dict)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"spectrogram file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty file")
    meta = _parse_header(path, lines[0], "spectrogram")
    try:
        t, f = int(meta["t"]), int(meta["f"])
        info = {"hop": int(meta["hop"]), "rate_hz": float(meta["rate_hz"])}
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}:1: bad header: {exc}") from exc
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if line == "":
            continue
        cells = line.split(",")
        if len(cells) != f:
            raise ParseError(f"{path}:{lineno}: expected {f} fields, got {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if len(rows) != t:
        raise ParseError(f"{path}: header declares {t} rows, found {len(rows)}")
    return np.asarray(rows), info
