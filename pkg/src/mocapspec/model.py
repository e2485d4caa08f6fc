"""Spatiotemporal attention model mapping one MoCap window to one spectrum.

A (W, M, D) marker window passes through a stack of pre-norm encoder layers
attending over the M markers of each frame, then a second, independently
parameterized stack attending over the W frames of each marker, a per-frame
cross-attention that queries the temporal features against the projected
spatial features, and a two-layer head that flattens marker features and
emits a nonnegative W-bin spectrum through a softplus.

Two reduced variants exist for ablations: "s" keeps only the marker-wise
stack (plus a width-matching projection into the standard head) and "t"
feeds embedded raw markers straight into the frame-wise stack, skipping
fusion. "st" is the full model.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .rng import RngState
from .tensor import Tensor

VARIANTS = ("s", "t", "st")

LN_EPS = 1e-5
INIT_STD = 0.02

CHECKPOINT_MAGIC = b"MCSCKPT1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the input geometry they act on."""

    markers: int
    window: int
    in_dim: int = 3
    d_s: int = 64
    d_t: int = 128
    d_f: int = 256
    heads_s: int = 2
    heads_t: int = 4
    heads_x: int | None = None  # defaults to heads_t
    layers_s: int = 2
    layers_t: int = 4
    dropout: float = 0.3
    d_out: int = 1

    def __post_init__(self):
        if self.heads_x is None:
            object.__setattr__(self, "heads_x", self.heads_t)
        for name in ("markers", "window", "in_dim", "d_s", "d_t", "d_f",
                     "heads_s", "heads_t", "heads_x", "layers_s", "layers_t"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_s % self.heads_s != 0:
            raise ConfigError(f"d_s={self.d_s} not divisible by heads_s={self.heads_s}")
        if self.d_t % self.heads_t != 0:
            raise ConfigError(f"d_t={self.d_t} not divisible by heads_t={self.heads_t}")
        if self.d_t % self.heads_x != 0:
            raise ConfigError(f"d_t={self.d_t} not divisible by heads_x={self.heads_x}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.d_out != 1:
            raise ConfigError(f"d_out must be 1, got {self.d_out}")

    def to_dict(self) -> dict:
        return {
            "markers": self.markers, "window": self.window, "in_dim": self.in_dim,
            "d_s": self.d_s, "d_t": self.d_t, "d_f": self.d_f,
            "heads_s": self.heads_s, "heads_t": self.heads_t, "heads_x": self.heads_x,
            "layers_s": self.layers_s, "layers_t": self.layers_t,
            "dropout": self.dropout, "d_out": self.d_out,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class _Streams:
    """Hands each dropout site its own derived RNG stream, in call order."""

    def __init__(self, rng: RngState | None):
        self.rng = rng
        self.index = 0

    def next(self) -> RngState | None:
        if self.rng is None:
            return None
        stream = self.rng.child(self.index)
        self.index += 1
        return stream


class SttModel:
    """The learnable parameter set plus the forward computation.

    Parameters live in an insertion-ordered dict of named float64 tensors;
    names double as the blob names in the checkpoint format. The marker-wise
    and frame-wise stacks share no tensors.
    """

    def __init__(self, config: ModelConfig, variant: str = "st", rng: RngState | None = None):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")
        self.config = config
        self.variant = variant
        self.params: dict[str, Tensor] = {}
        self._build(rng if rng is not None else RngState(0))

    # -- construction -------------------------------------------------------

    def _add(self, name: str, array: np.ndarray) -> None:
        self.params[name] = Tensor(array, requires_grad=True)

    def _normal(self, rng: RngState, shape: tuple[int, ...]) -> np.ndarray:
        return rng.gen.normal(0.0, INIT_STD, size=shape)

    def _add_encoder_layer(self, rng: RngState, prefix: str, width: int, heads: int) -> None:
        head_dim = width // heads
        self._add(prefix + "ln1.g", np.ones(width))
        self._add(prefix + "ln1.b", np.zeros(width))
        for proj in ("wq", "wk", "wv"):
            self._add(prefix + "attn." + proj, self._normal(rng, (heads, width, head_dim)))
        self._add(prefix + "attn.wo", self._normal(rng, (width, width)))
        self._add(prefix + "ln2.g", np.ones(width))
        self._add(prefix + "ln2.b", np.zeros(width))
        self._add(prefix + "ffn.w1", self._normal(rng, (width, width)))
        self._add(prefix + "ffn.b1", np.zeros(width))
        self._add(prefix + "ffn.w2", self._normal(rng, (width, width)))
        self._add(prefix + "ffn.b2", np.zeros(width))

    def _build(self, rng: RngState) -> None:
        c = self.config
        if self.variant in ("s", "st"):
            self._add("spatial_embed.w", self._normal(rng, (c.in_dim, c.d_s)))
            self._add("spatial_embed.b", np.zeros(c.d_s))
            self._add("marker_pos", self._normal(rng, (c.markers, c.d_s)))
            for i in range(c.layers_s):
                self._add_encoder_layer(rng, f"spatial.{i}.", c.d_s, c.heads_s)
        if self.variant == "t":
            self._add("input_embed.w", self._normal(rng, (c.in_dim, c.d_s)))
            self._add("input_embed.b", np.zeros(c.d_s))
        if self.variant in ("t", "st"):
            self._add("temporal_embed.w", self._normal(rng, (c.d_s, c.d_t)))
            self._add("temporal_embed.b", np.zeros(c.d_t))
            self._add("frame_pos", self._normal(rng, (c.window, c.d_t)))
            for i in range(c.layers_t):
                self._add_encoder_layer(rng, f"temporal.{i}.", c.d_t, c.heads_t)
        if self.variant == "st":
            head_dim = c.d_t // c.heads_x
            self._add("fusion.kv.w", self._normal(rng, (c.d_s, c.d_t)))
            self._add("fusion.kv.b", np.zeros(c.d_t))
            for proj in ("wq", "wk", "wv"):
                self._add("fusion.attn." + proj, self._normal(rng, (c.heads_x, c.d_t, head_dim)))
            self._add("fusion.attn.wo", self._normal(rng, (c.d_t, c.d_t)))
            self._add("fusion.ln.g", np.ones(c.d_t))
            self._add("fusion.ln.b", np.zeros(c.d_t))
        if self.variant == "s":
            self._add("bridge.w", self._normal(rng, (c.d_s, c.d_t)))
            self._add("bridge.b", np.zeros(c.d_t))
        self._add("head.w1", self._normal(rng, (c.markers * c.d_t, c.d_f)))
        self._add("head.b1", np.zeros(c.d_f))
        self._add("head.w2", self._normal(rng, (c.d_f, c.d_out)))
        self._add("head.b2", np.zeros(c.d_out))

    # -- bookkeeping ---------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- attention core --------------------------------------------------------

    def _mha(self, queries: Tensor, keys: Tensor, values: Tensor,
             prefix: str, heads: int, probs_out: list | None = None) -> Tensor:
        """Multi-head scaled dot-product attention over the second-to-last axis.

        queries: (..., S_q, d); keys/values: (..., S_k, d). Per-head
        projections are stored stacked as (heads, d, d/heads); for the
        projection GEMMs the heads are folded into one wide matrix.
        """
        wq, wk, wv = (self.params[prefix + p] for p in ("attn.wq", "attn.wk", "attn.wv"))
        wo = self.params[prefix + "attn.wo"]
        head_dim = wq.shape[-1]
        lead = queries.shape[:-2]
        s_q, s_k = queries.shape[-2], keys.shape[-2]

        def project(x: Tensor, w: Tensor, s: int) -> Tensor:
            wide = w.transpose(1, 0, 2).reshape(w.shape[1], heads * head_dim)
            split = (x @ wide).reshape(lead + (s, heads, head_dim))
            return self._swap_seq_axes(split)  # (..., heads, S, head_dim)

        q = project(queries, wq, s_q)
        k = project(keys, wk, s_k)
        v = project(values, wv, s_k)

        swap = tuple(range(q.ndim - 2)) + (q.ndim - 1, q.ndim - 2)
        scores = (q @ k.transpose(swap)) * (1.0 / np.sqrt(head_dim))
        probs = T.softmax_lastdim(scores)
        if probs_out is not None:
            probs_out.append(probs)
        attended = probs @ v  # (..., heads, S_q, head_dim)

        concat = self._swap_seq_axes(attended).reshape(lead + (s_q, heads * head_dim))
        return concat @ wo

    def _encoder_layer(self, x: Tensor, prefix: str, heads: int,
                       training: bool, streams: _Streams) -> Tensor:
        p = self.params
        drop = self.config.dropout
        u = T.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"], LN_EPS)
        attended = self._mha(u, u, u, prefix, heads)
        x = x + T.dropout(attended, drop, streams.next(), training)
        r = T.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"], LN_EPS)
        hidden = T.relu(r @ p[prefix + "ffn.w1"] + p[prefix + "ffn.b1"])
        f = hidden @ p[prefix + "ffn.w2"] + p[prefix + "ffn.b2"]
        return x + T.dropout(f, drop, streams.next(), training)

    # -- blocks -------------------------------------------------------------
    #
    # Every block accepts an optional leading batch axis: the attention and
    # elementwise ops broadcast over leading axes, so a (B, W, M, D) stack of
    # windows runs as one graph.

    def _check_window(self, window) -> Tensor:
        x = window if isinstance(window, Tensor) else Tensor(window)
        c = self.config
        expected = (c.window, c.markers, c.in_dim)
        if x.ndim not in (3, 4) or x.shape[-3:] != expected:
            raise ConfigError(f"window shape {x.shape} does not match configured {expected}")
        return x

    @staticmethod
    def _swap_seq_axes(x: Tensor) -> Tensor:
        """(..., A, B, C) -> (..., B, A, C): exchange the two sequence axes."""
        nd = x.ndim
        axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        return x.transpose(axes)

    def _require_rng(self, training: bool, rng: RngState | None) -> RngState | None:
        if training and self.config.dropout > 0.0 and rng is None:
            raise ContractError("training-mode forward requires an RngState for dropout")
        return rng

    def spatial_block(self, window, training: bool = False, rng: RngState | None = None) -> Tensor:
        """Embed markers, add the marker positional table, and attend within
        each frame. (W, M, D) -> (W, M, d_s)."""
        x = self._check_window(window)
        streams = _Streams(self._require_rng(training, rng))
        p = self.params
        h = x @ p["spatial_embed.w"] + p["spatial_embed.b"] + p["marker_pos"]
        for i in range(self.config.layers_s):
            h = self._encoder_layer(h, f"spatial.{i}.", self.config.heads_s, training, streams)
        return h

    def temporal_block(self, spatial_out: Tensor, training: bool = False,
                       rng: RngState | None = None) -> Tensor:
        """Project each marker's frame sequence to d_t, add the frame
        positional table, and attend across frames. (W, M, d_s) -> (M, W, d_t)."""
        streams = _Streams(self._require_rng(training, rng))
        p = self.params
        seq = self._swap_seq_axes(spatial_out)  # (..., M, W, d_s)
        h = seq @ p["temporal_embed.w"] + p["temporal_embed.b"] + p["frame_pos"]
        for i in range(self.config.layers_t):
            h = self._encoder_layer(h, f"temporal.{i}.", self.config.heads_t, training, streams)
        return h

    def fuse_cross_attention(self, spatial_out: Tensor, temporal_out: Tensor,
                             training: bool = False, rng: RngState | None = None,
                             probs_out: list | None = None) -> Tensor:
        """Per frame, let temporal features query the projected spatial
        features. Keys/values get a parameterless normalization after the
        width-matching projection; the post-fusion norm is affine.
        (W, M, d_s) x (M, W, d_t) -> (W, M, d_t)."""
        streams = _Streams(self._require_rng(training, rng))
        p = self.params
        kv = T.layer_norm(spatial_out @ p["fusion.kv.w"] + p["fusion.kv.b"], None, None, LN_EPS)
        queries = self._swap_seq_axes(temporal_out)  # (..., W, M, d_t)
        attended = self._mha(queries, kv, kv, "fusion.", self.config.heads_x, probs_out)
        mixed = queries + T.dropout(attended, self.config.dropout, streams.next(), training)
        return T.layer_norm(mixed, p["fusion.ln.g"], p["fusion.ln.b"], LN_EPS)

    def head(self, fused: Tensor) -> Tensor:
        """Flatten marker features per frame and regress one nonnegative
        value per frame: (W, M, d_t) -> (W,)."""
        c = self.config
        if fused.ndim < 3 or fused.shape[-3:] != (c.window, c.markers, c.d_t):
            raise ShapeError(
                f"head expects trailing {(c.window, c.markers, c.d_t)}, got {fused.shape}"
            )
        p = self.params
        lead = fused.shape[:-3]
        flat = fused.reshape(lead + (c.window, c.markers * c.d_t))
        hidden = T.relu(flat @ p["head.w1"] + p["head.b1"])
        out = hidden @ p["head.w2"] + p["head.b2"]
        return T.softplus(out.reshape(lead + (c.window,)))

    def forward(self, window, training: bool = False, rng: RngState | None = None) -> Tensor:
        """Predict the W-bin spectrum for one (W, M, D) window; a stacked
        (B, W, M, D) input yields (B, W) in a single graph."""
        rng = self._require_rng(training, rng)
        child = (lambda i: rng.child(i)) if rng is not None else (lambda i: None)
        if self.variant == "st":
            a = self.spatial_block(window, training, child(0))
            b = self.temporal_block(a, training, child(1))
            fused = self.fuse_cross_attention(a, b, training, child(2))
            return self.head(fused)
        if self.variant == "s":
            a = self.spatial_block(window, training, child(0))
            projected = a @ self.params["bridge.w"] + self.params["bridge.b"]
            return self.head(projected)
        # "t": embed raw markers to d_s, then the frame-wise stack only.
        x = self._check_window(window)
        h = x @ self.params["input_embed.w"] + self.params["input_embed.b"]
        b = self.temporal_block(h, training, child(1))
        return self.head(self._swap_seq_axes(b))

    def __call__(self, window, training: bool = False, rng: RngState | None = None) -> Tensor:
        return self.forward(window, training=training, rng=rng)


def ablation_variant(kind: str, config: ModelConfig, rng: RngState | None = None) -> SttModel:
    """Build the requested ablation ('s', 't', or the full 'st')."""
    return SttModel(config, variant=kind, rng=rng)


# -- checkpoint container --------------------------------------------------------


def save_checkpoint(model: SttModel, path) -> None:
    """Write magic, a JSON header (version, variant, config, named shapes),
    then each parameter as little-endian float32 in header order."""
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant,
        "config": model.config.to_dict(),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> SttModel:
    """Rebuild a model from a checkpoint, validating every blob's name and
    shape against the structure implied by the stored config."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 4 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    (header_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if offset + header_len > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header: {exc}") from exc
    offset += header_len

    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: format version {header.get('format_version')} "
            f"not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        config = ModelConfig.from_dict(header["config"])
        variant = header["variant"]
        listed = header["params"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: incomplete header: {exc}") from exc
    if variant not in VARIANTS:
        raise FormatError(f"{path}: unknown variant {variant!r}")

    model = SttModel(config, variant=variant)
    expected = {name: p.shape for name, p in model.params.items()}
    seen = set()
    for entry in listed:
        name, shape = entry[0], tuple(int(s) for s in entry[1])
        if name not in expected:
            raise FormatError(f"{path}: unexpected parameter {name!r}")
        if shape != expected[name]:
            raise FormatError(
                f"{path}: parameter {name!r} has shape {shape}, config implies {expected[name]}"
            )
        count = int(np.prod(shape)) if shape else 1
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated data for parameter {name!r}")
        values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        model.params[name].data = values.astype(np.float64)
        offset += nbytes
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return model
