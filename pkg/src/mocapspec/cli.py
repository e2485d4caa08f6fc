"""Command-line pipeline: synth, preprocess, train, ablate, infer, render.

Option resolution is defaults < --config file < explicit flags; every
subcommand echoes its fully resolved configuration as one JSON line before
doing any work, so a run can be reproduced from its output. Relative output
paths default under $MOCAPSPEC_DATA_DIR (current directory if unset).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_io
from . import dsp, render, synth
from .errors import ConfigError, DataError, MocapSpecError
from .model import ModelConfig, load_checkpoint
from .streams import SyncMark
from .train import RunLog, TrainConfig, ablation_table, build_model, train

_KIND_LABELS = {"s": "S", "t": "T", "st": "S+T"}

# Per-command defaults; None marks "required" or "derived later".
_DEFAULTS = {
    "synth": {"scene": "gait", "recipe": None, "trials": 1, "duration": 8.0,
              "noise": 0.0, "seed": 0, "out": "dataset"},
    "preprocess": {"mocap": None, "radar": None, "sync_mocap": 0.0, "sync_radar": 0.0,
                   "window": 256, "hop": 64, "taper": "rect", "out": "pairs.mcp"},
    "train": {"pairs": None, "epochs": 50, "batch": 8, "seed": 0, "variant": "st",
              "val_frac": 0.1, "d_s": 64, "d_t": 128, "d_f": 256, "heads_s": 2,
              "heads_t": 4, "heads_x": 4, "layers_s": 2, "layers_t": 4,
              "dropout_p": 0.3, "out": "run"},
    "ablate": {"pairs": None, "epochs": 50, "batch": 8, "seed": 0, "seeds": 3,
               "val_frac": 0.1, "d_s": 64, "d_t": 128, "d_f": 256, "heads_s": 2,
               "heads_t": 4, "heads_x": 4, "layers_s": 2, "layers_t": 4,
               "dropout_p": 0.3, "out": "ablation"},
    "infer": {"checkpoint": None, "mocap": None, "hop": 64, "rate": 256.0,
              "out": "predicted.csv"},
    "render": {"input": None, "measured": None, "out": "render.pgm"},
}


def _data_dir() -> Path:
    return Path(os.environ.get("MOCAPSPEC_DATA_DIR", "."))


def _resolve(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags, echoed as one JSON line."""
    defaults = dict(_DEFAULTS[args.command])
    if args.config is not None:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config file {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: config file is not valid JSON: {exc}") from exc
        unknown = set(from_file) - set(defaults)
        if unknown:
            raise ConfigError(
                f"{args.config}: keys {sorted(unknown)} not valid for {args.command!r}"
            )
        defaults.update(from_file)
    for key in _DEFAULTS[args.command]:
        flag = getattr(args, key, None)
        if flag is not None:
            defaults[key] = flag
    resolved = {"command": args.command, **defaults}
    print(json.dumps(resolved, sort_keys=True))
    return defaults


def _out_path(value, default_name: str | None = None) -> Path:
    path = Path(value)
    if not path.is_absolute():
        path = _data_dir() / path
    return path


def _require(cfg: dict, key: str, command: str):
    if cfg[key] is None:
        raise ConfigError(f"{command}: --{key.replace('_', '-')} is required")
    return cfg[key]


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _resolve(args)
    recipe = cfg["recipe"] if cfg["recipe"] else {
        "scene": cfg["scene"], "duration_s": cfg["duration"], "noise_std": cfg["noise"],
    }
    out = _out_path(cfg["out"])
    manifest = synth.make_dataset(recipe, cfg["trials"], cfg["seed"], out)
    print(f"wrote {cfg['trials']} trial pair(s) under {out} (manifest: {manifest.name})")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _resolve(args)
    mocap = data_io.load_mocap(_require(cfg, "mocap", "preprocess"))
    radar = data_io.load_radar(_require(cfg, "radar", "preprocess"))
    sync = SyncMark(cfg["sync_mocap"], cfg["sync_radar"])
    mocap, radar = data_io.align(mocap, radar, sync)
    pcfg = dsp.PreprocessConfig(
        window=cfg["window"], hop=cfg["hop"], taper=cfg["taper"],
        mocap_rate=1.0 / float(np.median(np.diff(mocap.t))) if mocap.n_frames > 1 else 250.0,
        radar_rate=radar.rate,
    )
    pairs = dsp.build_pairs(mocap, radar, pcfg)
    out = _out_path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    data_io.save_pairs(pairs, out)
    data_io.load_pairs(out)  # post-write validation
    t, w, m, d = pairs.mocap.shape
    print(f"wrote {out}: T={t} windows, W={w} samples, M={m} markers, D={d} dims")
    return 0


def _model_config(cfg: dict, pairs) -> ModelConfig:
    t, w, m, d = pairs.mocap.shape
    return ModelConfig(
        markers=m, window=w, in_dim=d, d_s=cfg["d_s"], d_t=cfg["d_t"], d_f=cfg["d_f"],
        heads_s=cfg["heads_s"], heads_t=cfg["heads_t"], heads_x=cfg["heads_x"],
        layers_s=cfg["layers_s"], layers_t=cfg["layers_t"], dropout=cfg["dropout_p"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch"], seed=cfg["seed"],
                       val_frac=cfg["val_frac"])


def cmd_train(args) -> int:
    cfg = _resolve(args)
    pairs = data_io.load_pairs(_require(cfg, "pairs", "train"))
    mcfg = _model_config(cfg, pairs)
    tcfg = _train_config(cfg)
    model = build_model(mcfg, cfg["variant"], tcfg.seed)
    out = _out_path(cfg["out"])
    log = train(pairs, model, tcfg, out_dir=out)
    load_checkpoint(out / "model_final.ckpt")  # post-write validation
    final = log.records[-1]
    val = f"{final.val_mse!r}" if final.val_mse is not None else "n/a"
    print(f"trained {cfg['variant']} for {tcfg.epochs} epochs: "
          f"final train MSE {final.train_mse!r}, val MSE {val}")
    print(f"artifacts under {out}: model_final.ckpt, model_best.ckpt, runlog.jsonl")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    pairs = data_io.load_pairs(_require(cfg, "pairs", "ablate"))
    mcfg = _model_config(cfg, pairs)
    tcfg = _train_config(cfg)
    out = _out_path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    kinds = ("s", "t", "st")
    _, rows = ablation_table(pairs, mcfg, tcfg, kinds=kinds, n_seeds=cfg["seeds"],
                             out_dir=out)

    by_kind = {row["kind"]: row["median_final_train_mse"] for row in rows}
    table_path = out / "ablation_table.csv"
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write("kind,median_final_train_mse,per_seed_final_train_mse\n")
        for row in rows:
            per_seed = ";".join(repr(v) for v in row["final_train_mse_per_seed"])
            fh.write(f"{_KIND_LABELS[row['kind']]},{row['median_final_train_mse']!r},{per_seed}\n")

    print(f"{'kind':>5}  median final train MSE")
    for row in rows:
        print(f"{_KIND_LABELS[row['kind']]:>5}  {row['median_final_train_mse']!r}")
    print(f"ordering: S+T <= T: {by_kind['st'] <= by_kind['t']}; "
          f"S+T <= S: {by_kind['st'] <= by_kind['s']}")
    print(f"artifacts under {out}: ablation_table.csv plus per-seed logs/checkpoints")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve(args)
    model = load_checkpoint(_require(cfg, "checkpoint", "infer"))
    mocap = data_io.load_mocap(_require(cfg, "mocap", "infer"))
    mc = model.config
    if mocap.n_markers != mc.markers or mocap.dim != mc.in_dim:
        raise ConfigError(
            f"checkpoint expects M={mc.markers}, D={mc.in_dim} but "
            f"{cfg['mocap']} has M={mocap.n_markers}, D={mocap.dim}"
        )
    filled = dsp.fill_gaps(mocap)
    resampled = dsp.resample_linear(filled, cfg["rate"])
    windows, _ = dsp.segment_windows(resampled.x, mc.window, cfg["hop"])
    predicted = np.stack([model.forward(w).data for w in windows])
    out = _out_path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    data_io.save_spectrogram(predicted, out, hop=cfg["hop"], rate_hz=cfg["rate"])
    print(f"wrote {out}: T={predicted.shape[0]} windows x F={predicted.shape[1]} bins")
    return 0


def _load_render_input(path: Path):
    """Returns ('spectrogram', T x F array) or ('runlog', RunLog)."""
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head.startswith(data_io.PAIRS_MAGIC):
        return "spectrogram", data_io.load_pairs(path).spec
    if head.startswith(b"spectrogram,"):
        return "spectrogram", data_io.load_spectrogram(path)[0]
    if head.startswith(b"{"):
        return "runlog", RunLog.from_jsonl(path)
    raise DataError(f"{path}: not a spectrogram CSV, pairs container, or run log")


def cmd_render(args) -> int:
    cfg = _resolve(args)
    paths = _require(cfg, "input", "render")
    if isinstance(paths, (str, Path)):
        paths = [paths]
    loaded = [_load_render_input(Path(p)) for p in paths]
    kinds = {kind for kind, _ in loaded}
    out = _out_path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)

    if kinds == {"runlog"}:
        csv_path = render.render_runlog([obj for _, obj in loaded], out)
    elif kinds == {"spectrogram"} and len(loaded) == 1:
        measured = None
        if cfg["measured"] is not None:
            kind, measured = _load_render_input(Path(cfg["measured"]))
            if kind != "spectrogram":
                raise DataError(f"--measured must be a spectrogram, got a {kind}")
        csv_path = render.render_spectrogram(loaded[0][1], out, measured_tf=measured)
    else:
        raise DataError("render needs either one spectrogram or one or more run logs")
    print(f"wrote {out} and {csv_path}")
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mocapspec",
        description="Learn single-range-bin Doppler spectrograms from MoCap markers.",
        epilog="Relative outputs land under $MOCAPSPEC_DATA_DIR (default: current directory).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None,
                       help="JSON file of option overrides (defaults < file < flags)")
        p.add_argument("-v", "--verbose", action="count", default=0,
                       help="-v for info logging, -vv for debug")

    p = sub.add_parser("synth", help="simulate paired MoCap/radar trials")
    p.add_argument("--scene", choices=sorted(synth._SCENE_BUILDERS),
                   default=None, help="builtin scene family")
    p.add_argument("--recipe", default=None, help="JSON recipe file (overrides --scene)")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--duration", type=float, default=None, help="seconds per trial")
    p.add_argument("--noise", type=float, default=None, help="complex noise std")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output directory")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="align, window, and transform a pair of files")
    p.add_argument("--mocap", default=None, help="mocap CSV path")
    p.add_argument("--radar", default=None, help="radar CSV path")
    p.add_argument("--sync-mocap", dest="sync_mocap", type=float, default=None,
                   help="sync pulse time on the mocap clock (s)")
    p.add_argument("--sync-radar", dest="sync_radar", type=float, default=None,
                   help="sync pulse time on the radar clock (s)")
    p.add_argument("--window", type=int, default=None, help="window length W (samples)")
    p.add_argument("--hop", type=int, default=None, help="hop H (samples)")
    p.add_argument("--taper", choices=dsp.TAPERS, default=None)
    p.add_argument("--out", default=None, help="pairs container path")
    common(p)
    p.set_defaults(func=cmd_preprocess)

    def model_flags(p):
        p.add_argument("--d-s", dest="d_s", type=int, default=None)
        p.add_argument("--d-t", dest="d_t", type=int, default=None)
        p.add_argument("--d-f", dest="d_f", type=int, default=None)
        p.add_argument("--heads-s", dest="heads_s", type=int, default=None)
        p.add_argument("--heads-t", dest="heads_t", type=int, default=None)
        p.add_argument("--heads-x", dest="heads_x", type=int, default=None)
        p.add_argument("--layers-s", dest="layers_s", type=int, default=None)
        p.add_argument("--layers-t", dest="layers_t", type=int, default=None)
        p.add_argument("--dropout-p", dest="dropout_p", type=float, default=None)
        p.add_argument("--val-frac", dest="val_frac", type=float, default=None)

    p = sub.add_parser("train", help="train a model on a pairs container")
    p.add_argument("--pairs", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", choices=("s", "t", "st"), default=None)
    model_flags(p)
    p.add_argument("--out", default=None, help="output directory")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train the s / t / st variants and compare")
    p.add_argument("--pairs", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="first seed")
    p.add_argument("--seeds", type=int, default=None, help="number of consecutive seeds")
    model_flags(p)
    p.add_argument("--out", default=None, help="output directory")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("infer", help="predict a spectrogram from a mocap file")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--mocap", default=None)
    p.add_argument("--hop", type=int, default=None)
    p.add_argument("--rate", type=float, default=None, help="resample rate (Hz)")
    p.add_argument("--out", default=None, help="spectrogram CSV path")
    common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("render", help="rasterize a spectrogram or loss curves")
    p.add_argument("--input", nargs="+", default=None,
                   help="spectrogram CSV, pairs container, or run log(s)")
    p.add_argument("--measured", default=None,
                   help="measured spectrogram for a stacked comparison image")
    p.add_argument("--out", default=None, help="PGM path (CSV twin written alongside)")
    common(p)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MocapSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
