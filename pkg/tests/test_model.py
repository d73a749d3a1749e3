import dataclasses

import numpy as np
import pytest

from pgcbm import model as md
from pgcbm import tensor as tc
from pgcbm.tensor import Tensor


def tiny_cfg(**kw):
    base = dict(
        input_groups=(2,),
        encoder_width=4,
        pos_frequencies=1,
        pos_width=2,
        pyramid_scales=(1, 2),
        width=4,
        attention_heads=2,
        decoder_width=4,
        quantiles=(0.25, 0.5, 0.75),
        norm_groups=2,
    )
    base.update(kw)
    return md.SubModelConfig(**base)


def full_cfg():
    return md.SubModelConfig()


def rng(seed=0):
    return np.random.default_rng(seed)


class TestPositionEncoding:
    def test_length(self):
        assert md.sinusoidal_position_encoding(12.0, -3.0, 4).shape == (16,)

    def test_bounded(self):
        enc = md.sinusoidal_position_encoding(179.0, 89.0, 6)
        assert np.all(np.abs(enc) <= 1.0)

    def test_wrapping(self):
        a = md.sinusoidal_position_encoding(190.0, 0.0, 3)
        b = md.sinusoidal_position_encoding(-170.0, 0.0, 3)
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_distinct_positions_distinct_codes(self):
        a = md.sinusoidal_position_encoding(10.0, 5.0, 4)
        b = md.sinusoidal_position_encoding(11.0, 5.0, 4)
        assert not np.allclose(a, b)


class TestParams:
    def test_init_deterministic(self):
        a = md.init_submodel_params(tiny_cfg(), seed=3)
        b = md.init_submodel_params(tiny_cfg(), seed=3)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k].data, b[k].data)

    def test_seed_changes_weights(self):
        a = md.init_submodel_params(tiny_cfg(), seed=3)
        b = md.init_submodel_params(tiny_cfg(), seed=4)
        assert not np.array_equal(a["head.w"].data, b["head.w"].data)

    def test_head_bias_spread(self):
        p = md.init_submodel_params(full_cfg(), seed=0)
        np.testing.assert_allclose(p["head.b"].data, [-1.0, -0.5, 0.0, 0.5, 1.0])

    def test_invalid_quantiles_rejected(self):
        with pytest.raises(ValueError):
            md.SubModelConfig(quantiles=(0.5, 0.5)).validate()
        with pytest.raises(ValueError):
            md.SubModelConfig(quantiles=(0.1, 1.2)).validate()

    def test_heads_must_divide_width(self):
        with pytest.raises(ValueError):
            md.SubModelConfig(width=33, attention_heads=2).validate()


class TestSubmodelForward:
    def test_zero_weights_emit_head_biases(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=0)
        for name, t in params.items():
            if name != "head.b":
                t.data[...] = 0.0
        x = rng(1).normal(size=(2, 4, 4)).astype(np.float32)
        pred = md.submodel_forward(params, cfg, x, np.array([20.0, -10.0]))
        for k, b in enumerate(params["head.b"].data):
            np.testing.assert_allclose(pred.values[k], b, atol=1e-12)

    def test_geometry_preserved(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=0)
        for h in (4, 6, 8):
            x = rng(2).normal(size=(2, h, h))
            pred = md.submodel_forward(params, cfg, x, np.array([5.0, 5.0]))
            assert pred.values.shape == (3, h, h)

    def test_infer_output_monotone(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=5)
        x = rng(3).normal(size=(2, 6, 6))
        v = md.submodel_forward(params, cfg, x, np.array([5.0, 5.0])).values
        assert np.all(np.diff(v, axis=0) >= 0)

    def test_monotone_sort_example(self):
        v = np.array([3.0, 1.0, 2.0, 5.0, 4.0]).reshape(5, 1, 1)
        np.testing.assert_array_equal(
            md.enforce_monotone(v, axis=0).ravel(), [1.0, 2.0, 3.0, 4.0, 5.0]
        )

    def test_infer_deterministic_train_seed_sensitive(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=5)
        x = rng(4).normal(size=(1, 2, 4, 4))
        pos = np.array([[5.0, 5.0]])
        a = md.submodel_forward(params, cfg, x, pos).values
        b = md.submodel_forward(params, cfg, x, pos).values
        assert np.array_equal(a, b)
        t1 = md.submodel_forward(params, cfg, x, pos, mode="train", seed=1).values
        t1b = md.submodel_forward(params, cfg, x, pos, mode="train", seed=1).values
        t2 = md.submodel_forward(params, cfg, x, pos, mode="train", seed=2).values
        assert np.array_equal(t1, t1b)
        assert not np.array_equal(t1, t2)

    def test_channel_mismatch_rejected(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=0)
        with pytest.raises(ValueError):
            md.submodel_forward(params, cfg, np.zeros((3, 4, 4)), np.zeros(2))

    def test_gradients_reach_every_parameter(self):
        cfg = tiny_cfg()
        params = md.init_submodel_params(cfg, seed=6)
        x = Tensor(rng(7).normal(size=(3, 2, 4, 4)))
        out = md.submodel_apply(params, cfg, x, np.tile([12.0, -4.0], (3, 1)),
                                train=True, seed=0)
        (out * out).sum().backward()
        dead = [k for k, t in params.items() if t.grad is None or not np.any(t.grad)]
        assert dead == []

    def test_gradients_match_finite_differences(self):
        cfg = tiny_cfg(dropout=0.0)
        params = md.init_submodel_params(cfg, seed=8)
        pos = np.array([[3.0, 7.0]])
        probe = ["enc0.conv1.w", "pos.dense.w", "pyr.proj.w", "att0.q.w",
                 "att0.mlp1.w", "dec.conv1.w", "head.w", "head.b", "x"]

        def graph(t):
            p = {k: t[k] if k in probe else v for k, v in params.items()}
            out = md.submodel_apply(p, cfg, t["x"], pos, train=True, seed=0)
            return (out * out).mean()

        bindings = {k: params[k].data for k in probe if k != "x"}
        bindings["x"] = rng(9).normal(size=(1, 2, 4, 4)) * 0.5
        err = tc.finite_difference_check(graph, bindings, step=1e-5, leaves=probe)
        assert err < 1e-5


@pytest.fixture(scope="module")
def pgcbm_model():
    return md.PGCBMModel.create(tiny_cfg(), seed=1)


@pytest.fixture(scope="module")
def vanilla_model():
    return md.VanillaCBMModel.create(tiny_cfg(), seed=2)


class TestPGCBM:
    @pytest.fixture
    def model(self, pgcbm_model):
        return pgcbm_model

    def test_shapes(self, model):
        x = rng(10).normal(size=(2, 6, 6))
        z, y = md.pgcbm_forward(model, x, np.array([15.0, -8.0]))
        assert set(z) == {"cover", "height", "stems"}
        for pred in z.values():
            assert pred.values.shape == (3, 6, 6)
        assert y.values.shape == (3, 6, 6)

    def test_concept_replay_is_bitwise(self, model):
        x = rng(11).normal(size=(2, 6, 6))
        pos = np.array([15.0, -8.0])
        z, y = md.pgcbm_forward(model, x, pos)
        override = {k: v.values for k, v in z.items()}
        z2, y2 = md.pgcbm_forward(model, x, pos, concept_override=override)
        assert np.array_equal(y.values, y2.values)
        for k in z:
            assert np.array_equal(z[k].values, z2[k].values)

    def test_intervention_changes_output(self, model):
        x = rng(12).normal(size=(2, 6, 6))
        pos = np.array([15.0, -8.0])
        z, y = md.pgcbm_forward(model, x, pos)
        shifted = {"cover": z["cover"].values + 5.0}
        _, y2 = md.pgcbm_forward(model, x, pos, concept_override=shifted)
        assert not np.array_equal(y.values, y2.values)

    def test_gradients_flow_through_both_stages(self, model):
        x = Tensor(rng(13).normal(size=(1, 2, 4, 4)))
        z, y = md.pgcbm_apply(model, x, np.array([[15.0, -8.0]]), train=True, seed=0)
        (y * y).sum().backward()
        for pdict in (*model.concept_params.values(), model.agg_params):
            dead = [k for k, t in pdict.items() if t.grad is None or not np.any(t.grad)]
            assert dead == []
            for t in pdict.values():
                t.grad = None

    def test_bypass_variant_widens_aggregation_input(self):
        m = md.PGCBMModel.create(tiny_cfg(), seed=0, bypass_latent=True)
        assert m.agg_cfg.input_groups == (9, 2)
        x = rng(14).normal(size=(2, 4, 4))
        _, y = md.pgcbm_forward(m, x, np.array([15.0, -8.0]))
        assert y.values.shape == (3, 4, 4)


class TestVanilla:
    @pytest.fixture
    def model(self, vanilla_model):
        return vanilla_model

    def test_forward_shape(self, model):
        x = rng(15).normal(size=(2, 4, 4))
        y = md.vanilla_forward(model, x, np.array([15.0, -8.0]))
        assert y.values.shape == (3, 4, 4)

    def test_concepts_receive_no_gradient(self, model):
        x = rng(16).normal(size=(1, 2, 4, 4))
        out = md.vanilla_apply(model, x, np.array([[15.0, -8.0]]), train=True, seed=0)
        (out * out).sum().backward()
        for pdict in model.concept_params.values():
            assert all(t.grad is None for t in pdict.values())
        assert any(t.grad is not None and np.any(t.grad)
                   for t in model.agg_params.values())

    def test_unfreeze_refused(self, model):
        with pytest.raises(md.FrozenModelError):
            model.unfreeze_concepts()
        thawed = dataclasses.replace(model, frozen=False)
        with pytest.raises(md.FrozenModelError):
            md.vanilla_apply(thawed, np.zeros((1, 2, 4, 4)), np.zeros((1, 2)),
                             train=True, seed=0)


class TestBlackbox:
    def test_parameter_parity(self):
        cfg = tiny_cfg()
        target = md.PGCBMModel.create(cfg, seed=0).total_param_count()
        bb = md.BlackboxModel.create(cfg, seed=0)
        n = md.param_count(bb.params)
        assert abs(n - target) / target <= 0.10

    def test_forward_shape(self):
        bb = md.BlackboxModel.create(tiny_cfg(), seed=0)
        x = rng(17).normal(size=(2, 4, 4))
        y = md.blackbox_forward(bb, x, np.array([15.0, -8.0]))
        assert y.values.shape == (3, 4, 4)


class TestCheckpoint:
    def _named(self, seed=0):
        params = md.init_submodel_params(tiny_cfg(), seed=seed)
        return {k: t.data for k, t in params.items()}

    def test_round_trip_bit_exact(self, tmp_path):
        named = self._named()
        path = tmp_path / "m.pgck"
        md.write_checkpoint(path, named, {"lr": 1e-6, "tag": "a"}, epoch=7, val_loss=0.25)
        back, config, epoch, val_loss = md.read_checkpoint(path)
        assert back.keys() == named.keys()
        for k in named:
            assert np.array_equal(back[k], named[k])
        assert (config, epoch, val_loss) == ({"lr": 1e-6, "tag": "a"}, 7, 0.25)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.pgck"
        md.write_checkpoint(path, self._named(), {}, 0, 0.0)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(md.CheckpointFormatError):
            md.read_checkpoint(path)

    def test_corruption_detected(self, tmp_path):
        path = tmp_path / "m.pgck"
        md.write_checkpoint(path, self._named(), {}, 0, 0.0)
        blob = bytearray(path.read_bytes())
        blob[64] ^= 0x01
        path.write_bytes(bytes(blob))
        with pytest.raises(md.CheckpointFormatError):
            md.read_checkpoint(path)

    def test_version_gate(self, tmp_path):
        import struct

        from pgcbm.data import fnv1a

        payload = md.CKPT_MAGIC + struct.pack("<I", 99)
        path = tmp_path / "m.pgck"
        path.write_bytes(payload + struct.pack("<Q", fnv1a(payload)))
        with pytest.raises(md.CheckpointFormatError):
            md.read_checkpoint(path)
