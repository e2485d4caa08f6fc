"""Model: shape contracts, residual identities, equivariances, attention
normalization, end-to-end gradients, variants, and the checkpoint format."""

import json
import struct

import numpy as np
import pytest

from mocapspec.errors import ConfigError, FormatError, ShapeError
from mocapspec.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    SttModel,
    ablation_variant,
    load_checkpoint,
    save_checkpoint,
)
from mocapspec.rng import RngState
from mocapspec.tensor import Tensor
from mocapspec.train import mse_loss

from helpers import max_rel_err, numeric_grad_at


def tiny_config(dropout=0.0, **overrides):
    base = dict(markers=3, window=8, in_dim=3, d_s=8, d_t=8, d_f=8,
                heads_s=2, heads_t=2, heads_x=2, layers_s=1, layers_t=1,
                dropout=dropout)
    base.update(overrides)
    return ModelConfig(**base)


def random_window(config, seed=0):
    return RngState(seed).gen.normal(size=(config.window, config.markers, config.in_dim))


def zero_residual_branches(model, prefixes):
    """Zero the attention output and FFN second layer so each layer becomes
    the identity on its residual stream."""
    for name, p in model.params.items():
        if any(name.startswith(pre) for pre in prefixes):
            if name.endswith(("attn.wo", "ffn.w2", "ffn.b2")):
                p.data = np.zeros_like(p.data)


class TestConfig:
    def test_heads_x_defaults_to_heads_t(self):
        cfg = ModelConfig(markers=4, window=8, heads_t=4, heads_x=None)
        assert cfg.heads_x == 4

    @pytest.mark.parametrize("bad", [
        {"d_s": 10, "heads_s": 4},
        {"d_t": 10, "heads_t": 4},
        {"d_t": 12, "heads_t": 4, "heads_x": 5},
        {"dropout": 1.0},
        {"d_out": 2},
        {"layers_s": 0},
        {"markers": 0},
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ConfigError):
            ModelConfig(**{**dict(markers=4, window=8), **bad})

    def test_roundtrip_dict(self):
        cfg = tiny_config()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBlocks:
    def test_spatial_output_shape(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(1))
        out = model.spatial_block(random_window(cfg))
        assert out.shape == (cfg.window, cfg.markers, cfg.d_s)

    def test_spatial_residual_identity_when_branches_zeroed(self):
        cfg = tiny_config(layers_s=2)
        model = SttModel(cfg, rng=RngState(2))
        zero_residual_branches(model, ["spatial."])
        window = random_window(cfg, seed=3)
        out = model.spatial_block(window).data
        p = model.params
        embedded = (window @ p["spatial_embed.w"].data
                    + p["spatial_embed.b"].data + p["marker_pos"].data)
        assert np.array_equal(out, embedded)

    def test_marker_permutation_equivariance(self):
        cfg = tiny_config()
        window = random_window(cfg, seed=4)
        perm = RngState(5).gen.permutation(cfg.markers)

        model = SttModel(cfg, rng=RngState(6))
        base = model.spatial_block(window).data
        model.params["marker_pos"].data = model.params["marker_pos"].data[perm]
        permuted = model.spatial_block(window[:, perm, :]).data
        assert np.allclose(permuted, base[:, perm, :], atol=1e-12)

    def test_temporal_output_shape(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(7))
        a = Tensor(RngState(8).gen.normal(size=(cfg.window, cfg.markers, cfg.d_s)))
        out = model.temporal_block(a)
        assert out.shape == (cfg.markers, cfg.window, cfg.d_t)

    def test_temporal_residual_identity_when_branches_zeroed(self):
        cfg = tiny_config(layers_t=3)
        model = SttModel(cfg, rng=RngState(9))
        zero_residual_branches(model, ["temporal."])
        a = RngState(10).gen.normal(size=(cfg.window, cfg.markers, cfg.d_s))
        out = model.temporal_block(Tensor(a)).data
        p = model.params
        projected = (a.transpose(1, 0, 2) @ p["temporal_embed.w"].data
                     + p["temporal_embed.b"].data + p["frame_pos"].data)
        assert np.array_equal(out, projected)

    def test_frame_permutation_equivariance(self):
        cfg = tiny_config()
        a = RngState(11).gen.normal(size=(cfg.window, cfg.markers, cfg.d_s))
        perm = RngState(12).gen.permutation(cfg.window)

        model = SttModel(cfg, rng=RngState(13))
        base = model.temporal_block(Tensor(a)).data
        model.params["frame_pos"].data = model.params["frame_pos"].data[perm]
        permuted = model.temporal_block(Tensor(a[perm])).data
        assert np.allclose(permuted, base[:, perm, :], atol=1e-12)

    def test_fusion_output_shape_and_row_sums(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(14))
        a = Tensor(RngState(15).gen.normal(size=(cfg.window, cfg.markers, cfg.d_s)))
        b = Tensor(RngState(16).gen.normal(size=(cfg.markers, cfg.window, cfg.d_t)))
        probs = []
        out = model.fuse_cross_attention(a, b, probs_out=probs)
        assert out.shape == (cfg.window, cfg.markers, cfg.d_t)
        sums = probs[0].data.sum(axis=-1)
        assert np.max(np.abs(sums - 1.0)) < 1e-12

    def test_single_marker_attention_weight_is_exactly_one(self):
        cfg = tiny_config(markers=1)
        model = SttModel(cfg, rng=RngState(17))
        a = Tensor(RngState(18).gen.normal(size=(cfg.window, 1, cfg.d_s)))
        b = Tensor(RngState(19).gen.normal(size=(1, cfg.window, cfg.d_t)))
        probs = []
        model.fuse_cross_attention(a, b, probs_out=probs)
        assert np.all(probs[0].data == 1.0)

    def test_head_nonnegative_and_length(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(20))
        fused = Tensor(RngState(21).gen.normal(size=(cfg.window, cfg.markers, cfg.d_t)) * 3)
        out = model.head(fused)
        assert out.shape == (cfg.window,)
        assert np.all(out.data >= 0.0)

    def test_zeroed_head_emits_softplus_zero(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(22))
        for name in ("head.w1", "head.b1", "head.w2", "head.b2"):
            model.params[name].data = np.zeros_like(model.params[name].data)
        fused = Tensor(RngState(23).gen.normal(size=(cfg.window, cfg.markers, cfg.d_t)))
        out = model.head(fused).data
        assert np.allclose(out, np.log(2.0), rtol=0, atol=1e-15)


class TestForward:
    def test_paper_scale_geometry(self):
        cfg = ModelConfig(markers=53, window=256)
        model = SttModel(cfg, rng=RngState(24))
        out = model.forward(random_window(cfg, seed=25))
        assert out.shape == (256,)
        assert np.all(np.isfinite(out.data)) and np.all(out.data >= 0)

    def test_eval_mode_bit_identical(self):
        cfg = tiny_config(dropout=0.3)
        model = SttModel(cfg, rng=RngState(26))
        window = random_window(cfg, seed=27)
        assert np.array_equal(model.forward(window).data, model.forward(window).data)

    def test_training_mode_seeded_determinism(self):
        cfg = tiny_config(dropout=0.3)
        model = SttModel(cfg, rng=RngState(28))
        window = random_window(cfg, seed=29)
        a = model.forward(window, training=True, rng=RngState(30)).data
        b = model.forward(window, training=True, rng=RngState(30)).data
        c = model.forward(window, training=True, rng=RngState(31)).data
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_training_mode_requires_rng(self):
        cfg = tiny_config(dropout=0.3)
        model = SttModel(cfg, rng=RngState(32))
        from mocapspec.errors import ContractError
        with pytest.raises(ContractError):
            model.forward(random_window(cfg), training=True)

    def test_geometry_mismatch_is_config_error(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(33))
        with pytest.raises(ConfigError) as err:
            model.forward(np.zeros((8, 5, 3)))
        assert "(8, 5, 3)" in str(err.value)

    def test_end_to_end_gradients_match_finite_differences(self):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(34))
        window = random_window(cfg, seed=35)
        target = np.abs(RngState(36).gen.normal(size=cfg.window))

        def scalar():
            return mse_loss(model.forward(window), target).item()

        model.zero_grad()
        mse_loss(model.forward(window), target).backward()

        picker = RngState(37)
        for name, p in model.params.items():
            k = min(p.size, 6)
            idx = picker.gen.choice(p.size, size=k, replace=False)
            numeric = numeric_grad_at(scalar, p.data, idx)
            analytic = p.grad.reshape(-1)[idx]
            err = max_rel_err(analytic, numeric)
            assert err < 1e-4, f"{name}: rel err {err}"


class TestVariants:
    def test_st_matches_full_model_parameter_for_parameter(self):
        cfg = tiny_config()
        full = SttModel(cfg, variant="st", rng=RngState(40))
        via_kind = ablation_variant("st", cfg, rng=RngState(40))
        assert list(full.params) == list(via_kind.params)
        for name in full.params:
            assert np.array_equal(full.params[name].data, via_kind.params[name].data)

    def test_s_variant_structure(self):
        model = ablation_variant("s", tiny_config(), rng=RngState(41))
        names = list(model.params)
        assert not any(n.startswith("temporal") or n == "frame_pos" or n.startswith("fusion")
                       for n in names)
        assert "bridge.w" in names and "marker_pos" in names

    def test_t_variant_structure(self):
        model = ablation_variant("t", tiny_config(), rng=RngState(42))
        names = list(model.params)
        assert not any(n.startswith("spatial") or n == "marker_pos" or n.startswith("fusion")
                       for n in names)
        assert "input_embed.w" in names and "frame_pos" in names

    def test_all_variants_forward(self):
        cfg = tiny_config()
        window = random_window(cfg, seed=43)
        for kind in ("s", "t", "st"):
            out = ablation_variant(kind, cfg, rng=RngState(44)).forward(window)
            assert out.shape == (cfg.window,)
            assert np.all(out.data >= 0)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            ablation_variant("spatiotemporal", tiny_config())

    def test_stacks_share_no_tensors(self):
        model = SttModel(tiny_config(layers_s=2, layers_t=2), rng=RngState(45))
        ids = [id(p.data) for p in model.params.values()]
        assert len(ids) == len(set(ids))
        spatial = {n for n in model.params if n.startswith(("spatial", "marker_pos"))}
        temporal = {n for n in model.params if n.startswith(("temporal", "frame_pos"))}
        assert spatial and temporal and not (spatial & temporal)

    def test_param_count_is_pure_function_of_config(self):
        cfg = tiny_config(layers_s=2, layers_t=3)
        a = SttModel(cfg, rng=RngState(46))
        b = SttModel(cfg, rng=RngState(47))
        assert a.param_count() == b.param_count()

        c = cfg
        per_layer = lambda d: 6 * d * d + 6 * d
        expected = (
            c.in_dim * c.d_s + c.d_s + c.markers * c.d_s + c.layers_s * per_layer(c.d_s)
            + c.d_s * c.d_t + c.d_t + c.window * c.d_t + c.layers_t * per_layer(c.d_t)
            + c.d_s * c.d_t + c.d_t + 4 * c.d_t * c.d_t + 2 * c.d_t
            + c.markers * c.d_t * c.d_f + c.d_f + c.d_f * c.d_out + c.d_out
        )
        assert a.param_count() == expected


class TestCheckpoint:
    def test_roundtrip_reproduces_eval_outputs(self, tmp_path):
        cfg = tiny_config(dropout=0.2)
        model = SttModel(cfg, rng=RngState(50))
        window = random_window(cfg, seed=51)
        before = model.forward(window).data

        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        restored = load_checkpoint(path)
        assert restored.variant == "st" and restored.config == cfg
        after = restored.forward(window).data
        assert np.max(np.abs(after - before)) < 1e-5

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(52))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        (tmp_path / "cut.ckpt").write_bytes(raw[: len(raw) - 17])
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "cut.ckpt")

    def test_shape_mismatch_names_parameter(self, tmp_path):
        cfg = tiny_config()
        model = SttModel(cfg, rng=RngState(53))
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        off = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack_from("<I", raw, off)
        header = json.loads(raw[off + 4 : off + 4 + hlen])
        header["params"][0][1] = [999, 999]
        blob = json.dumps(header, sort_keys=True).encode()
        (tmp_path / "tampered.ckpt").write_bytes(
            CHECKPOINT_MAGIC + struct.pack("<I", len(blob)) + blob + raw[off + 4 + hlen:]
        )
        with pytest.raises(FormatError) as err:
            load_checkpoint(tmp_path / "tampered.ckpt")
        assert "999" in str(err.value)

    def test_variant_roundtrip(self, tmp_path):
        for kind in ("s", "t"):
            model = ablation_variant(kind, tiny_config(), rng=RngState(54))
            path = tmp_path / f"{kind}.ckpt"
            save_checkpoint(model, path)
            assert load_checkpoint(path).variant == kind
