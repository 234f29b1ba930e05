"""Model topology, initialization, checkpoints, and end-to-end gradients."""

import numpy as np
import pytest

from ctb.anchors import IGNORE, NEGATIVE, POSITIVE
from ctb.errors import DataError
from ctb.losses import detection_loss
from ctb.net.model import (FULL_HEAD_VALUES, NODULE_HEAD_VALUES, PRESETS,
                           Model, ModelConfig, init_from_checkpoint,
                           load_checkpoint, model_from_checkpoint,
                           model_to_checkpoint, save_checkpoint)


def tiny_cfg(preset="vnet_ir_rpn", **kw):
    kw.setdefault("patch_size", 16)
    kw.setdefault("width", 4)
    return ModelConfig(preset=preset, **kw)


class TestConfig:
    def test_bad_preset_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(preset="resnet50")

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(patch_size=20)

    def test_bad_width_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(width=5)
        with pytest.raises(ValueError):
            ModelConfig(width=2)

    def test_bad_head_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig(head_values=7)


class TestShapes:
    @pytest.mark.parametrize("preset", PRESETS)
    def test_cubic_contract(self, preset):
        model = Model(tiny_cfg(preset))
        rng = np.random.default_rng(0)
        out = model.forward(rng.random((16, 16, 16), dtype=np.float32))
        assert out.shape == (4, 4, 4, 3, 10)
        out = model.forward(rng.random((32, 32, 32), dtype=np.float32))
        assert out.shape == (8, 8, 8, 3, 10)

    def test_rectangular_window(self):
        model = Model(tiny_cfg())
        out = model.forward(np.zeros((16, 24, 32), dtype=np.float32))
        assert out.shape == (4, 6, 8, 3, 10)

    def test_nodule_head_width(self):
        model = Model(tiny_cfg(head_values=NODULE_HEAD_VALUES))
        out = model.forward(np.zeros((16, 16, 16), dtype=np.float32))
        assert out.shape == (4, 4, 4, 3, 5)

    def test_indivisible_window_rejected(self):
        model = Model(tiny_cfg())
        with pytest.raises(ValueError):
            model.forward(np.zeros((16, 20, 16), dtype=np.float32))
        with pytest.raises(ValueError):
            model.forward(np.zeros((16, 16), dtype=np.float32))


class TestInit:
    def test_deterministic_by_seed(self):
        a = Model(tiny_cfg(seed=5))
        b = Model(tiny_cfg(seed=5))
        for k, v in a.params().items():
            assert np.array_equal(v, b.params()[k])
        c = Model(tiny_cfg(seed=6))
        assert any(not np.array_equal(v, c.params()[k])
                   for k, v in a.params().items())

    def test_he_scaling_and_zero_bias(self):
        model = Model(ModelConfig(preset="unet_rpn", patch_size=16, width=8, seed=0))
        p = model.params()
        w = p["enc1.w"]  # (16, 8, 3, 3, 3): fan_in 8*27 = 216
        expect = np.sqrt(2.0 / 216)
        assert np.std(w) == pytest.approx(expect, rel=0.05)
        assert np.all(p["enc1.b"] == 0)
        assert np.all(p["head.b"] == 0)

    def test_forward_deterministic(self):
        model = Model(tiny_cfg(seed=3))
        x = np.random.default_rng(1).random((16, 16, 16), dtype=np.float32)
        assert np.array_equal(model.forward(x), model.forward(x))


class TestFingerprints:
    def test_stable_across_instances(self):
        assert Model(tiny_cfg(seed=0)).fingerprint() == Model(tiny_cfg(seed=9)).fingerprint()

    def test_distinct_presets_and_widths(self):
        prints = {Model(tiny_cfg(p)).fingerprint() for p in PRESETS}
        assert len(prints) == 3
        assert Model(tiny_cfg(width=8)).fingerprint() != Model(tiny_cfg()).fingerprint()

    def test_body_fingerprint_ignores_head_width(self):
        full = Model(tiny_cfg(head_values=FULL_HEAD_VALUES))
        nodule = Model(tiny_cfg(head_values=NODULE_HEAD_VALUES))
        assert full.fingerprint() != nodule.fingerprint()
        assert full.body_fingerprint() == nodule.body_fingerprint()


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        model = Model(tiny_cfg(seed=2))
        ck = model_to_checkpoint(model, meta={"epoch": 3})
        save_checkpoint(ck, tmp_path / "m.ctbk")
        back = load_checkpoint(tmp_path / "m.ctbk")
        assert back.fingerprint == ck.fingerprint
        assert back.body_fingerprint == ck.body_fingerprint
        assert back.meta["epoch"] == 3
        assert set(back.tensors) == set(ck.tensors)
        for k in ck.tensors:
            assert np.array_equal(back.tensors[k], ck.tensors[k])

    def test_save_is_byte_stable(self, tmp_path):
        model = Model(tiny_cfg(seed=2))
        ck = model_to_checkpoint(model)
        save_checkpoint(ck, tmp_path / "a.ctbk")
        save_checkpoint(ck, tmp_path / "b.ctbk")
        assert (tmp_path / "a.ctbk").read_bytes() == (tmp_path / "b.ctbk").read_bytes()

    def test_snapshot_is_isolated_from_later_updates(self):
        model = Model(tiny_cfg(seed=2))
        ck = model_to_checkpoint(model)
        before = ck.tensors["head.w"].copy()
        model.head.w += 1.0
        assert np.array_equal(ck.tensors["head.w"], before)

    def test_rebuilt_model_reproduces_outputs(self, tmp_path):
        model = Model(tiny_cfg(seed=4))
        x = np.random.default_rng(2).random((16, 16, 16), dtype=np.float32)
        want = model.forward(x)
        save_checkpoint(model_to_checkpoint(model), tmp_path / "m.ctbk")
        clone = model_from_checkpoint(load_checkpoint(tmp_path / "m.ctbk"))
        assert np.array_equal(clone.forward(x), want)

    def test_truncated_payload_rejected(self, tmp_path):
        model = Model(tiny_cfg())
        save_checkpoint(model_to_checkpoint(model), tmp_path / "m.ctbk")
        raw = (tmp_path / "m.ctbk").read_bytes()
        (tmp_path / "bad.ctbk").write_bytes(raw[:-8])
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.ctbk")

    def test_trailing_bytes_rejected(self, tmp_path):
        model = Model(tiny_cfg())
        save_checkpoint(model_to_checkpoint(model), tmp_path / "m.ctbk")
        raw = (tmp_path / "m.ctbk").read_bytes()
        (tmp_path / "bad.ctbk").write_bytes(raw + b"\x00\x00\x00\x00")
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.ctbk")

    def test_bad_magic_rejected(self, tmp_path):
        (tmp_path / "bad.ctbk").write_bytes(b'{"magic": "nope"}\n')
        with pytest.raises(DataError):
            load_checkpoint(tmp_path / "bad.ctbk")


class TestTransfer:
    def test_body_transfer_reinits_head(self):
        src = Model(tiny_cfg(head_values=NODULE_HEAD_VALUES, seed=1))
        ck = model_to_checkpoint(src)
        dst = Model(tiny_cfg(head_values=FULL_HEAD_VALUES, seed=7))
        fresh_head = dst.head.w.copy()
        init_from_checkpoint(dst, ck, reinit_output=True)
        assert np.array_equal(dst.stem.conv.w, src.stem.conv.w)
        assert np.array_equal(dst.fuse.conv.w, src.fuse.conv.w)
        assert np.array_equal(dst.head.w, fresh_head)
        assert dst.head.w.shape != src.head.w.shape

    def test_full_load_requires_exact_match(self):
        src = Model(tiny_cfg(seed=1))
        ck = model_to_checkpoint(src)
        other = Model(tiny_cfg("unet_rpn", seed=1))
        with pytest.raises(ValueError):
            init_from_checkpoint(other, ck)

    def test_body_transfer_requires_matching_body(self):
        src = Model(tiny_cfg(width=8, seed=1))
        ck = model_to_checkpoint(src)
        dst = Model(tiny_cfg(width=4, seed=1))
        with pytest.raises(ValueError):
            init_from_checkpoint(dst, ck, reinit_output=True)


def _loss_states(n_anchors, rng):
    state = np.full(n_anchors, NEGATIVE, dtype=np.int8)
    pos = rng.choice(n_anchors, size=3, replace=False)
    state[pos] = POSITIVE
    ign = rng.choice(np.setdiff1d(np.arange(n_anchors), pos), size=5, replace=False)
    state[ign] = IGNORE
    return state


class TestEndToEndGradient:
    def test_backward_fills_every_grad(self):
        model = Model(tiny_cfg(seed=0))
        x = np.random.default_rng(3).random((16, 16, 16), dtype=np.float32)
        out = model.forward(x)
        model.backward(np.ones_like(out))
        grads = model.grads()
        assert set(grads) == set(model.params())
        assert all(g is not None for g in grads.values())

    def test_backward_before_forward_raises(self):
        model = Model(tiny_cfg())
        with pytest.raises(RuntimeError):
            model.backward(np.zeros((4, 4, 4, 3, 10)))

    def test_parameter_gradcheck_double(self):
        # a slice of acceptance criterion: one preset, double precision,
        # full composite loss with a near-knee regression offset
        rng = np.random.default_rng(7)
        cfg = tiny_cfg("vnet_ir_rpn", dtype="float64", seed=0)
        model = Model(cfg)
        x = rng.random((16, 16, 16))
        n = 4 * 4 * 4 * 3
        state = _loss_states(n, rng)
        targets = (rng.standard_normal((n, 4)) * 0.4)
        labels = rng.integers(0, 5, n).astype(np.int32)

        def loss_of():
            raw = model.forward(x).reshape(n, 10)
            lb, grad = detection_loss(raw, state, targets, labels)
            return lb.total, grad

        base, grad = loss_of()
        model.forward(x)
        model.backward(grad.reshape(4, 4, 4, 3, 10))
        grads = model.grads()

        eps = 1e-6
        params = model.params()
        checked = 0
        for name in ["stem.w", "enc2.w", "neck.proj.w", "head.w", "head.b"]:
            p = params[name]
            flat = p.reshape(-1)
            for j in rng.choice(flat.size, size=3, replace=False):
                keep = flat[j]
                flat[j] = keep + eps
                up, _ = loss_of()
                flat[j] = keep - eps
                dn, _ = loss_of()
                flat[j] = keep
                fd = (up - dn) / (2 * eps)
                an = grads[name].reshape(-1)[j]
                denom = max(abs(fd), abs(an), 1e-8)
                assert abs(fd - an) / denom < 1e-4, (name, j, fd, an)
                checked += 1
        assert checked == 15
