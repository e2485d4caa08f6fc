"""Grayscale raster (PGM) and CSV rendering for spectrograms and run logs.

Images use the portable graymap format so no imaging library is needed; a
CSV twin carrying the same grid is always written next to the image.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError
from .train import RunLog

_KIND_LABELS = {"s": "S", "t": "T", "st": "S+T"}
#: Gray levels used for successive curves in run-log plots.
_CURVE_LEVELS = (0, 100, 180)


def normalize01(values: np.ndarray) -> np.ndarray:
    """Affine rescale to [0, 1]; a constant array maps to mid-gray 0.5."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.full(values.shape, 0.5)
    return (values - lo) / (hi - lo)


def write_pgm(image01: np.ndarray, path) -> None:
    """Binary PGM (P5), one byte per pixel, row 0 at the top."""
    image01 = np.asarray(image01, dtype=np.float64)
    if image01.ndim != 2:
        raise DataError(f"image must be 2-d, got shape {image01.shape}")
    levels = np.clip(np.round(image01 * 255.0), 0, 255).astype(np.uint8)
    height, width = levels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(levels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM file")
    width, height = (int(v) for v in parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=width * height)
    return pixels.reshape(height, width)


def _write_grid_csv(grid: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in np.asarray(grid, dtype=np.float64):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def spectrogram_panel(spec_tf: np.ndarray) -> np.ndarray:
    """Orient a T x F spectrogram for display: rows are frequency bins with
    the highest positive Doppler at the top (zero-Doppler mid-row), columns
    are time."""
    spec_tf = np.asarray(spec_tf, dtype=np.float64)
    if spec_tf.ndim != 2:
        raise DataError(f"spectrogram must be 2-d (T, F), got {spec_tf.shape}")
    return np.flipud(spec_tf.T)


def render_spectrogram(spec_tf: np.ndarray, out_pgm, measured_tf: np.ndarray | None = None) -> Path:
    """Write a spectrogram image plus its CSV twin.

    With `measured_tf` given, the measured panel is stacked above the
    predicted one, mirroring a measured-vs-predicted comparison figure.
    Returns the CSV twin path.
    """
    panel = spectrogram_panel(spec_tf)
    if measured_tf is not None:
        measured = spectrogram_panel(measured_tf)
        if measured.shape != panel.shape:
            raise DataError(
                f"measured panel {measured.shape} does not match predicted {panel.shape}"
            )
        panel = np.vstack([measured, panel])
    image = normalize01(panel)
    write_pgm(image, out_pgm)
    csv_path = Path(out_pgm).with_suffix(".csv")
    _write_grid_csv(image, csv_path)
    return csv_path


def _series_of(log: RunLog) -> list[tuple[str, list[float]]]:
    series = [("train", [r.train_mse for r in log.records])]
    if any(r.val_mse is not None for r in log.records):
        series.append(("val", [r.val_mse for r in log.records]))
    if any(r.test_mse is not None for r in log.records):
        series.append(("test", [r.test_mse for r in log.records]))
    return series


def render_runlog(logs: list[RunLog], out_pgm, height: int = 240, width: int = 480) -> Path:
    """Plot loss curves over epochs (log10 y-axis) into a PGM raster.

    One log: its train/val/test series. Several logs (an ablation): one
    train curve per log. The CSV twin lists kind,series,epoch,mse rows.
    Returns the CSV twin path.
    """
    if not logs:
        raise DataError("no run logs to render")
    if len(logs) == 1:
        curves = [(logs[0].kind, name, vals) for name, vals in _series_of(logs[0])]
    else:
        curves = [(log.kind, "train", [r.train_mse for r in log.records]) for log in logs]

    flat = [v for _, _, vals in curves for v in vals if v is not None]
    if not flat:
        raise DataError("run logs contain no loss values")
    logged = np.log10(np.clip(np.asarray(flat, dtype=np.float64), 1e-12, None))
    lo, hi = logged.min(), logged.max()
    span = hi - lo if hi > lo else 1.0

    canvas = np.full((height, width), 255, dtype=np.float64)
    max_epochs = max(len(vals) for _, _, vals in curves)
    for index, (_, _, vals) in enumerate(curves):
        level = _CURVE_LEVELS[index % len(_CURVE_LEVELS)]
        pts = []
        for e, v in enumerate(vals):
            if v is None:
                continue
            x = 0 if max_epochs == 1 else round(e * (width - 1) / (max_epochs - 1))
            y_norm = (np.log10(max(v, 1e-12)) - lo) / span
            y = int(round((height - 1) * (1.0 - y_norm)))
            pts.append((x, y))
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            n = max(abs(x1 - x0), abs(y1 - y0)) + 1
            xs = np.round(np.linspace(x0, x1, n)).astype(int)
            ys = np.round(np.linspace(y0, y1, n)).astype(int)
            canvas[ys, xs] = level
        if len(pts) == 1:
            canvas[pts[0][1], pts[0][0]] = level

    write_pgm(canvas / 255.0, out_pgm)
    csv_path = Path(out_pgm).with_suffix(".csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("kind,series,epoch,mse\n")
        for kind, name, vals in curves:
            label = _KIND_LABELS.get(kind, kind)
            for e, v in enumerate(vals, start=1):
                if v is not None:
                    fh.write(f"{label},{name},{e},{v!r}\n")
    return csv_path
