import json

import numpy as np
import pytest

from heartcast import tensor_core as tc
from heartcast.attention import AttentionConfig, Variant
from heartcast.errors import ConfigurationError, DimensionError
from heartcast.model import (
    HeartModel,
    ModelConfig,
    decoder_forward,
    encoder_forward,
    heart_forward,
    init_params,
    load_checkpoint,
    regressor_forward,
)

from helpers import ALL_VARIANTS, model_grad_error, model_setup, random_params
from oracles import loop_conv


def _cfg(s=2, f=3, t=4, t_out=4, latent=3, lag=2, variant=Variant.NONE, **kw):
    return ModelConfig(s, f, t, t_out, latent=latent, conv_lag=lag, encoder_dropout=0.0,
                       attention=AttentionConfig(variant, **kw))


class TestEncoder:
    def test_zero_kernels_give_zero_latent(self):
        cfg = _cfg()
        p = init_params(cfg, 0)
        p["enc.kernel"][:] = 0.0
        x = np.random.default_rng(0).normal(size=(1, 2, 3, 4))
        np.testing.assert_array_equal(encoder_forward(x, p, cfg).data, 0.0)

    def test_single_station_unit_lag_is_affine(self):
        cfg = _cfg(s=1, lag=1, latent=4)
        rng = np.random.default_rng(1)
        p = random_params(init_params(cfg, 0), rng)
        x = rng.normal(size=(1, 1, 3, 4))
        out = encoder_forward(x, p, cfg).data[0, 0]
        w = p["enc.kernel"][:, 0, 0, 0][:, None] * p["enc.mix"]
        for t in range(4):
            ref = tc.dense_apply(x[0, 0, :, t], w, p["enc.bias"][0, :, 0]).data
            np.testing.assert_allclose(out[:, t], np.maximum(ref, 0.0), atol=1e-12)

    @pytest.mark.parametrize("lag", [1, 2, 3, 4])
    def test_matches_loop_convolution(self, lag):
        cfg = _cfg(s=2, t=4, lag=lag)
        rng = np.random.default_rng(2 + lag)
        p = random_params(init_params(cfg, 0), rng)
        x = rng.normal(size=(2, 2, 3, 4))
        pre = loop_conv(x, p["enc.mix"], p["enc.kernel"], p["enc.bias"][..., 0])
        np.testing.assert_allclose(encoder_forward(x, p, cfg).data, np.maximum(pre, 0.0), atol=1e-12, rtol=0)

    def test_shape_mismatch(self):
        cfg = _cfg()
        with pytest.raises(DimensionError):
            encoder_forward(np.zeros((1, 2, 4, 4)), init_params(cfg, 0), cfg)

    def test_cross_station_sensitivity(self):
        cfg = _cfg(s=3, t=6, lag=3)
        rng = np.random.default_rng(7)
        p = random_params(init_params(cfg, 0), rng)
        p["enc.bias"][:] = 5.0  # keep ReLU active
        x = rng.normal(size=(1, 3, 3, 6))
        x2 = x.copy()
        x2[0, 2] += 1.0
        y, y2 = encoder_forward(x, p, cfg).data, encoder_forward(x2, p, cfg).data
        assert not np.allclose(y[0, 0], y2[0, 0])
        p["enc.kernel"] *= np.eye(3)[None, :, :, None]
        y, y2 = encoder_forward(x, p, cfg).data, encoder_forward(x2, p, cfg).data
        np.testing.assert_array_equal(y[0, :2], y2[0, :2])


class TestDecoderRegressor:
    def test_unit_weight_squeezes(self):
        cfg = _cfg(latent=1)
        p = init_params(cfg, 0)
        p["dec.w"][:] = 1.0
        lat = np.abs(np.random.default_rng(0).normal(size=(2, 2, 1, 4)))
        np.testing.assert_array_equal(decoder_forward(lat, p, cfg).data, lat[:, :, 0])

    def test_constant_propagates(self):
        cfg = _cfg(latent=3)
        p = init_params(cfg, 0)
        p["dec.w"][:] = [[0.5, 0.25, 1.0]]
        out = decoder_forward(np.full((1, 2, 3, 4), 2.0), p, cfg).data
        np.testing.assert_allclose(out, 3.5, atol=1e-15)

    def test_matches_dot_product(self):
        cfg = _cfg(latent=3)
        rng = np.random.default_rng(3)
        p = random_params(init_params(cfg, 0), rng)
        lat = rng.normal(size=(2, 2, 3, 4))
        out = decoder_forward(lat, p, cfg).data
        for b in range(2):
            for s in range(2):
                for t in range(4):
                    ref = sum(p["dec.w"][0, h] * lat[b, s, h, t] for h in range(3)) + float(p["dec.b"])
                    assert out[b, s, t] == pytest.approx(max(ref, 0.0), abs=1e-12)

    def test_regressor_identity_and_bias(self):
        cfg = _cfg(t=4, t_out=4)
        p = init_params(cfg, 0)
        y = np.random.default_rng(4).normal(size=(1, 2, 4))
        p["reg.w"] = np.eye(4)
        np.testing.assert_array_equal(regressor_forward(y, p, cfg).data, y)
        p["reg.w"] = np.zeros((4, 4))
        p["reg.b"] = np.array([1.0, -2.0, 0.5, 3.0])
        np.testing.assert_array_equal(regressor_forward(y, p, cfg).data, np.broadcast_to(p["reg.b"], (1, 2, 4)))

    def test_regressor_slice_wise(self):
        cfg = _cfg(t=4, t_out=2)
        rng = np.random.default_rng(5)
        p = random_params(init_params(cfg, 0), rng)
        y = rng.normal(size=(3, 2, 4))
        out = regressor_forward(y, p, cfg).data
        for b in range(3):
            for s in range(2):
                np.testing.assert_allclose(out[b, s], tc.dense_apply(y[b, s], p["reg.w"], p["reg.b"]).data, atol=1e-14)

    def test_regressor_shape_error(self):
        cfg = _cfg()
        with pytest.raises(DimensionError):
            regressor_forward(np.zeros((1, 2, 5)), init_params(cfg, 0), cfg)


class TestHeart:
    def test_shape_contract(self):
        cfg = ModelConfig(3, 4, 72, 72, attention=AttentionConfig(Variant.ATT, 2, 2))
        x = np.random.default_rng(0).normal(size=(3, 4, 72))
        assert HeartModel(cfg)(x).shape == (3, 72)

    def test_long_input_short_output(self):
        cfg = ModelConfig(2, 3, 168, 72, latent=4, attention=AttentionConfig(Variant.OATT))
        assert HeartModel(cfg)(np.zeros((2, 2, 3, 168))).shape == (2, 2, 72)

    @pytest.mark.parametrize("variant", list(Variant))
    @pytest.mark.parametrize("placement", ["pre_encoder", "between_encoder_decoder"])
    def test_shape_every_variant_and_placement(self, variant, placement):
        rng = np.random.default_rng(1)
        m = model_setup(variant, rng, placement=placement)
        assert m(rng.normal(size=(2, 3, 6))).shape == (2, 4)

    def test_mock_gate_off_matches_baseline_bitwise(self):
        rng = np.random.default_rng(2)
        base = HeartModel(_cfg(t=12, t_out=6), seed=3)
        m = HeartModel(_cfg(t=12, t_out=6, variant=Variant.MATT, heads=2, depth=2), seed=3)
        x = rng.normal(size=(5, 2, 3, 12))
        assert m(x).tobytes() == base(x).tobytes()

    @pytest.mark.parametrize("variant", ALL_VARIANTS)
    def test_end_to_end_gradient(self, variant):
        assert model_grad_error(variant, np.random.default_rng(3)).error < 1e-4

    def test_between_placement_gradient(self):
        rng = np.random.default_rng(4)
        assert model_grad_error(Variant.OATT, rng, placement="between_encoder_decoder").error < 1e-4

    def test_between_placement_acts_on_latent(self):
        cfg = _cfg(t=6, latent=5, variant=Variant.ATT, heads=1, depth=1, placement="between_encoder_decoder")
        p = init_params(cfg, 0)
        assert p["att.q.w0"].shape == (1, 5, 6, 6)

    def test_parameter_shape_conflict(self):
        cfg = _cfg(variant=Variant.ATT)
        p = init_params(_cfg(variant=Variant.OATT), 0)
        with pytest.raises(ConfigurationError):
            HeartModel(cfg, p)

    def test_train_mode_dropout_seeded(self):
        cfg = ModelConfig(2, 3, 6, 4, latent=3, attention=AttentionConfig(Variant.ATT, 2, 2))
        m = HeartModel(cfg, seed=1)
        x = np.random.default_rng(5).normal(size=(2, 2, 3, 6))
        a = m(x, tc.make_rng(3), "train")
        b = m(x, tc.make_rng(3), "train")
        assert a.tobytes() == b.tobytes()


class TestCheckpoint:
    @pytest.mark.parametrize("variant", [Variant.NONE, Variant.TCATT, Variant.NLATT])
    def test_round_trip_bitwise(self, tmp_path, variant):
        rng = np.random.default_rng(6)
        m = model_setup(variant, rng)
        path = tmp_path / "m.npz"
        m.save(path, extra={"epoch": 3})
        m2, meta = load_checkpoint(path)
        assert m2.config == m.config
        assert meta["extra"] == {"epoch": 3}
        x = rng.normal(size=(3, 2, 3, 6))
        assert m2(x).tobytes() == m(x).tobytes()
        for k in m.params:
            assert m2.params[k].tobytes() == m.params[k].tobytes()

    def test_header_is_self_describing(self, tmp_path):
        m = HeartModel(_cfg())
        m.save(tmp_path / "m.npz")
        with np.load(tmp_path / "m.npz") as z:
            meta = json.loads(z["__meta__"].tobytes())
            assert meta["format"] == "heartcast-checkpoint/1"
            assert "Philox" in meta["rng"]
            assert meta["parameters"]["reg.w"] == [4, 4]
            assert z["reg.w"].dtype == np.dtype("<f8")

    def test_rejects_unknown_format(self, tmp_path):
        header = np.frombuffer(json.dumps({"format": "other"}).encode(), dtype=np.uint8)
        np.savez(tmp_path / "bad.npz", __meta__=header)
        with pytest.raises(ConfigurationError):
            load_checkpoint(tmp_path / "bad.npz")


class TestConfig:
    def test_round_trip(self):
        cfg = _cfg(variant=Variant.NLATT, heads=3, depth=1, nl_embed_dim=4)
        assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    @pytest.mark.parametrize("bad", [dict(stations=0), dict(conv_lag=9), dict(encoder_dropout=1.0)])
    def test_invalid(self, bad):
        kw = dict(stations=2, features=3, t_in=4, t_out=4)
        kw.update(bad)
        with pytest.raises(ConfigurationError):
            ModelConfig(**kw)
