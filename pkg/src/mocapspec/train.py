"""Supervised training: MSE objective, Adam with L2 decay, one-cycle LR.

Training runs for a fixed number of epochs with no early stopping. All
randomness (split, shuffling, dropout) derives from TrainConfig.seed, so a
run is bit-reproducible; epoch metrics are computed in eval mode.
"""

from __future__ import annotations

import dataclasses
import gc
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dsp import WindowedPairs
from .errors import ConfigError, ContractError, DataError
from .model import ModelConfig, SttModel, save_checkpoint
from .rng import RngState
from .tensor import Tensor

# Derivation-path roots under the run seed.
_SPLIT, _SHUFFLE, _DROPOUT, _INIT = 0, 1, 2, 3


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    peak_lr: float = 3e-4
    start_lr: float = 3e-7
    end_lr: float = 3e-10
    warmup_frac: float = 0.10
    weight_decay: float = 1e-5
    seed: int = 0
    val_frac: float = 0.10

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}"
            )
        if not (0.0 < self.warmup_frac < 1.0):
            raise ConfigError(f"warmup_frac must lie in (0, 1), got {self.warmup_frac}")
        if self.start_lr >= self.peak_lr or self.end_lr >= self.peak_lr:
            raise ConfigError("start_lr and end_lr must be below peak_lr")
        if min(self.start_lr, self.end_lr, self.peak_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if not (0.0 <= self.val_frac < 1.0):
            raise ConfigError(f"val_frac must lie in [0, 1), got {self.val_frac}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


# -- objective -----------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over the bins of one spectrum."""
    target = target if isinstance(target, Tensor) else Tensor(np.asarray(target))
    if pred.ndim != 1 or target.ndim != 1 or pred.shape != target.shape:
        raise ContractError(
            f"mse_loss expects equal-length vectors, got {pred.shape} vs {target.shape}"
        )
    diff = pred - target
    return (diff * diff).mean()


# -- schedule -------------------------------------------------------------------


def one_cycle_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Piecewise-linear one-cycle rate for optimizer step `step`.

    Rises from start_lr to peak_lr over the first ceil(warmup_frac * total)
    steps, peaking exactly at the warmup boundary, then falls linearly to
    end_lr at the final step.
    """
    if total_steps < 1:
        raise ContractError(f"total_steps must be >= 1, got {total_steps}")
    if not (0 <= step < total_steps):
        raise ContractError(f"step {step} outside [0, {total_steps})")
    warmup = int(np.ceil(cfg.warmup_frac * total_steps))
    if step == 0:
        return cfg.start_lr
    if step < warmup:
        return cfg.start_lr + (cfg.peak_lr - cfg.start_lr) * (step / warmup)
    if step == warmup:
        return cfg.peak_lr
    if step == total_steps - 1:
        return cfg.end_lr
    span = total_steps - 1 - warmup
    return cfg.peak_lr + (cfg.end_lr - cfg.peak_lr) * ((step - warmup) / span)


# -- optimizer ------------------------------------------------------------------


class AdamState:
    """First/second moment accumulators plus the shared step counter."""

    def __init__(self, params: dict[str, Tensor],
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update; decay enters as an additive L2
    gradient term (classic Adam-with-L2, not decoupled)."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if weight_decay != 0.0:
            g = g + weight_decay * p.data
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# -- run log ---------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float | None
    test_mse: float | None
    wall_s: float | None = None


@dataclass
class RunLog:
    """Per-epoch metrics plus the full per-step LR trace for one run.

    Wall-clock timings stay on the in-memory records only; the serialized
    log must be byte-identical across repeat runs with the same seed.
    """

    kind: str
    seed: int
    train_indices: list[int]
    val_indices: list[int]
    records: list[EpochRecord] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)

    @property
    def final_train_mse(self) -> float:
        return self.records[-1].train_mse

    @property
    def best_val_mse(self) -> float | None:
        vals = [r.val_mse for r in self.records if r.val_mse is not None]
        return min(vals) if vals else None

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            meta = {
                "type": "meta", "kind": self.kind, "seed": self.seed,
                "epochs": len(self.records), "total_steps": len(self.lr_trace),
                "train_indices": self.train_indices, "val_indices": self.val_indices,
            }
            fh.write(json.dumps(meta, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(
                    {"type": "epoch", "epoch": r.epoch, "train_mse": r.train_mse,
                     "val_mse": r.val_mse, "test_mse": r.test_mse},
                    sort_keys=True) + "\n")
            fh.write(json.dumps({"type": "lr_trace", "lr": self.lr_trace},
                                sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "RunLog":
        records: list[EpochRecord] = []
        meta: dict = {}
        lr: list[float] = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                if row["type"] == "meta":
                    meta = row
                elif row["type"] == "epoch":
                    records.append(EpochRecord(row["epoch"], row["train_mse"],
                                               row["val_mse"], row["test_mse"]))
                elif row["type"] == "lr_trace":
                    lr = row["lr"]
        return cls(kind=meta.get("kind", "st"), seed=meta.get("seed", 0),
                   train_indices=meta.get("train_indices", []),
                   val_indices=meta.get("val_indices", []),
                   records=records, lr_trace=lr)


# -- training loop ----------------------------------------------------------------


def split_indices(n_windows: int, val_frac: float, rng: RngState):
    """Disjoint train/validation index sets from a seeded shuffle."""
    perm = rng.gen.permutation(n_windows)
    n_val = int(n_windows * val_frac)
    val = np.sort(perm[:n_val])
    train = np.sort(perm[n_val:])
    if len(train) < 1:
        raise DataError(f"no training windows left after splitting {n_windows} at {val_frac}")
    return train, val


def evaluate(model: SttModel, pairs: WindowedPairs, indices=None,
             chunk: int = 8) -> float:
    """Mean per-window MSE in eval mode (dropout off)."""
    indices = np.arange(pairs.n_windows) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        raise DataError("cannot evaluate on an empty index set")
    total = 0.0
    for lo in range(0, len(indices), chunk):
        batch = indices[lo : lo + chunk]
        pred = model.forward(pairs.mocap[batch]).data
        diff = pred - pairs.spec[batch]
        total += float((diff * diff).mean(axis=1).sum())
    return total / len(indices)


def build_model(config: ModelConfig, variant: str, seed: int) -> SttModel:
    """Model whose initialization derives from the same seed the run uses."""
    return SttModel(config, variant=variant, rng=RngState(seed).child(_INIT))


def train(pairs: WindowedPairs, model: SttModel, cfg: TrainConfig,
          test_pairs: WindowedPairs | None = None, out_dir=None,
          kind_tag: str | None = None) -> RunLog:
    """Run the fixed-epoch loop; returns the RunLog and leaves the model at
    its final parameters.

    With out_dir set, writes model_final / model_best checkpoints (best by
    validation MSE, falling back to train MSE when there is no validation
    split) and the serialized run log.
    """
    if pairs.n_windows < 1:
        raise DataError("empty dataset")
    kind = kind_tag if kind_tag is not None else model.variant
    root = RngState(cfg.seed)
    train_idx, val_idx = split_indices(pairs.n_windows, cfg.val_frac, root.child(_SPLIT))

    steps_per_epoch = int(np.ceil(len(train_idx) / cfg.batch_size))
    total_steps = cfg.epochs * steps_per_epoch
    state = AdamState(model.params)
    log = RunLog(kind=kind, seed=cfg.seed,
                 train_indices=[int(i) for i in train_idx],
                 val_indices=[int(i) for i in val_idx])

    best_metric = np.inf
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    suffix = f"_{kind}" if kind_tag is not None else ""

    # The graph is acyclic (reference counting frees it), so cyclic-GC scans
    # in the hot loop are pure overhead; pause them and sweep per epoch.
    # BLAS threading is capped at 1: the matrices here are far too small to
    # gain from it, and spinning pool threads slow everything else down.
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        with threadpool_limits(limits=1):
            global_step = 0
            for epoch in range(1, cfg.epochs + 1):
                started = time.perf_counter()
                order = root.child(_SHUFFLE, epoch).gen.permutation(train_idx)
                for b0 in range(0, len(order), cfg.batch_size):
                    batch = order[b0 : b0 + cfg.batch_size]
                    model.zero_grad()
                    # One stacked graph per step, with its own mask stream.
                    stream = root.child(_DROPOUT, epoch, global_step)
                    pred = model.forward(pairs.mocap[batch], training=True, rng=stream)
                    diff = pred - Tensor(pairs.spec[batch])
                    loss = (diff * diff).mean()  # mean over batch of per-window MSE
                    loss.backward()
                    lr = one_cycle_lr(global_step, total_steps, cfg)
                    grads = {name: p.grad for name, p in model.params.items()}
                    adam_step(model.params, grads, state, lr, cfg.weight_decay)
                    log.lr_trace.append(lr)
                    global_step += 1

                train_mse = evaluate(model, pairs, train_idx)
                val_mse = evaluate(model, pairs, val_idx) if len(val_idx) else None
                test_mse = evaluate(model, test_pairs) if test_pairs is not None else None
                log.records.append(EpochRecord(epoch, train_mse, val_mse, test_mse,
                                               wall_s=time.perf_counter() - started))

                metric = val_mse if val_mse is not None else train_mse
                if out_dir is not None and metric < best_metric:
                    best_metric = metric
                    save_checkpoint(model, out_dir / f"model{suffix}_best.ckpt")
                gc.collect()
    finally:
        if gc_was_enabled:
            gc.enable()

    if out_dir is not None:
        save_checkpoint(model, out_dir / f"model{suffix}_final.ckpt")
        log.to_jsonl(out_dir / f"runlog{suffix}.jsonl")
    return log


def run_ablation(pairs: WindowedPairs, model_config: ModelConfig, cfg: TrainConfig,
                 kinds=("s", "t", "st"), test_pairs: WindowedPairs | None = None,
                 out_dir=None) -> dict[str, RunLog]:
    """Train each variant with identical data order and seed; comparable logs."""
    for kind in kinds:
        if kind not in ("s", "t", "st"):
            raise ConfigError(f"unknown ablation kind {kind!r}")
    logs: dict[str, RunLog] = {}
    for kind in kinds:
        model = build_model(model_config, kind, cfg.seed)
        logs[kind] = train(pairs, model, cfg, test_pairs=test_pairs,
                           out_dir=out_dir, kind_tag=kind)
    return logs


def ablation_table(pairs: WindowedPairs, model_config: ModelConfig, cfg: TrainConfig,
                   kinds=("s", "t", "st"), n_seeds: int = 3,
                   test_pairs: WindowedPairs | None = None, out_dir=None):
    """Repeat the ablation over consecutive seeds and summarize medians.

    Returns (per_kind_logs, rows) where rows carry one dict per kind with
    the median final train MSE across seeds.
    """
    if n_seeds < 1:
        raise ConfigError(f"n_seeds must be >= 1, got {n_seeds}")
    all_logs: dict[str, list[RunLog]] = {k: [] for k in kinds}
    for s in range(n_seeds):
        seed_cfg = dataclasses.replace(cfg, seed=cfg.seed + s)
        seed_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed_cfg.seed}"
        logs = run_ablation(pairs, model_config, seed_cfg, kinds=kinds,
                            test_pairs=test_pairs, out_dir=seed_dir)
        for kind, log in logs.items():
            all_logs[kind].append(log)
    rows = []
    for kind in kinds:
        finals = [log.final_train_mse for log in all_logs[kind]]
        rows.append({
            "kind": kind,
            "median_final_train_mse": float(np.median(finals)),
            "final_train_mse_per_seed": finals,
        })
    return all_logs, rows
