"""Region score aggregation, full forward pass, and checkpoints."""

import math

import numpy as np
import pytest

from sarl import tensor as T
from sarl.data import FormatError
from sarl.head import (ClassifierParams, ModelConfig, build_model, forward,
                       load_checkpoint, region_score_aggregate, save_checkpoint)
from sarl.representation import EncoderConfig
from sarl.tensor import Tensor


def np_softmax(a, axis):
    e = np.exp(a - a.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def forward_oracle(x, model, y):
    """Straight-line numpy transcription of the whole forward pass."""
    cfg = model.config
    p = {k: t.data for k, t in model.parameters().items()}
    d = cfg.feature_dim // cfg.n_heads
    q, k, v = x @ p["attention.w_q"], x @ p["attention.w_k"], x @ p["attention.w_v"]
    heads = []
    for h in range(cfg.n_heads):
        sl = slice(h * d, (h + 1) * d)
        attn = np_softmax(q[:, sl] @ k[:, sl].T / math.sqrt(d), 1)
        heads.append(attn @ v[:, sl])
    f = np.concatenate(heads, axis=1)

    f_g = f.mean(axis=0)
    table = p["labels.table"]
    num_c = cfg.num_classes
    stacked = np.concatenate([np.tile(f_g, (num_c, 1)), table], axis=1)
    f_s = stacked @ p["fusion.weight"] + p["fusion.bias"]

    fu, sv = f @ p["bilinear.u"], f_s @ p["bilinear.v"]
    mass = np.zeros((f.shape[0], num_c))
    for i in range(f.shape[0]):
        for c in range(num_c):
            hidden = np.tanh(fu[i] * sv[c])
            mass[i, c] = float(
                ((hidden @ p["bilinear.mix"] + p["bilinear.bias"])
                 @ p["bilinear.score"])[0])
    b = np_softmax(mass, 1)
    f_r = b @ f_s
    scores = f_r @ p["classifier.weights"] + p["classifier.bias"]
    z = (np_softmax(scores, 0) * scores).sum(axis=0)

    m = f @ p["map.weights"]
    theta = np_softmax(m @ (y / y.sum()), 0)
    beta = np_softmax(y.astype(float), 0)
    fn = np.linalg.norm(f, axis=1) + 1e-8
    sn = np.linalg.norm(f_s, axis=1) + 1e-8
    co = 1.0 - (f @ f_s.T) / np.outer(fn, sn)
    fwd = theta[:, None] * np_softmax(mass, 1)
    bwd = beta[None, :] * np_softmax(mass, 0)
    l_ot = float((fwd * co).sum() + (bwd * co).sum())
    return z, l_ot


def tiny_config(**overrides):
    enc = EncoderConfig(in_channels=0, grid_h=2, grid_w=2, feature_dim=8,
                        mode="precomputed")
    base = dict(num_classes=3, feature_dim=8, label_dim=6, bilinear_dim=4,
                bilinear_out=4, n_heads=2, encoder=enc)
    base.update(overrides)
    return ModelConfig(**base)


def conv_config(**overrides):
    enc = EncoderConfig(in_channels=2, grid_h=2, grid_w=2, feature_dim=8)
    base = dict(num_classes=3, feature_dim=8, label_dim=6, bilinear_dim=4,
                bilinear_out=4, n_heads=2, encoder=enc)
    base.update(overrides)
    return ModelConfig(**base)


class TestRegionScoreAggregate:
    def test_identical_patch_rows_pass_through(self):
        rng = np.random.default_rng(0)
        row = rng.normal(size=5)
        f_r = Tensor(np.tile(row, (4, 1)))
        cls = ClassifierParams(Tensor(rng.normal(size=(5, 3))),
                               Tensor(rng.normal(size=3)))
        z = region_score_aggregate(f_r, cls).data
        np.testing.assert_allclose(z, row @ cls.weights.data + cls.bias.data,
                                   atol=1e-12)

    def test_single_patch(self):
        rng = np.random.default_rng(1)
        f_r = Tensor(rng.normal(size=(1, 5)))
        cls = ClassifierParams(Tensor(rng.normal(size=(5, 3))),
                               Tensor(rng.normal(size=3)))
        z = region_score_aggregate(f_r, cls).data
        np.testing.assert_allclose(
            z, (f_r.data @ cls.weights.data + cls.bias.data)[0], atol=1e-12)

    def test_two_patch_closed_form(self):
        # patch scores [ln 3, 0] for one class: weights [0.75, 0.25], so
        # z = 0.75 * ln 3 = 0.8240...
        f_r = Tensor(np.array([[math.log(3.0)], [0.0]]))
        cls = ClassifierParams(Tensor(np.eye(1)), Tensor(np.zeros(1)))
        z = region_score_aggregate(f_r, cls).data
        np.testing.assert_allclose(z, [0.75 * math.log(3.0)], atol=1e-12)
        np.testing.assert_allclose(z, [0.8240], atol=5e-5)

    def test_shift_offset_moves_one_logit_exactly(self):
        rng = np.random.default_rng(2)
        f_r = Tensor(rng.normal(size=(4, 5)))
        w = Tensor(rng.normal(size=(5, 3)))
        base = region_score_aggregate(f_r, ClassifierParams(w, Tensor(np.zeros(3)))).data
        shift = np.array([0.0, 1.7, 0.0])
        moved = region_score_aggregate(f_r, ClassifierParams(w, Tensor(shift))).data
        np.testing.assert_allclose(moved - base, shift, atol=1e-9)

    def test_patch_permutation_invariance(self):
        rng = np.random.default_rng(3)
        f_r = rng.normal(size=(6, 5))
        cls = ClassifierParams(Tensor(rng.normal(size=(5, 4))),
                               Tensor(rng.normal(size=4)))
        base = region_score_aggregate(Tensor(f_r), cls).data
        for _ in range(5):
            perm = rng.permutation(6)
            again = region_score_aggregate(Tensor(f_r[perm]), cls).data
            np.testing.assert_allclose(again, base, atol=1e-12)

    def test_patch_weights_on_simplex(self):
        rng = np.random.default_rng(4)
        f_r = rng.normal(size=(5, 4))
        w, b = rng.normal(size=(4, 3)), rng.normal(size=3)
        weights = np_softmax(f_r @ w + b, 0)
        assert weights.min() >= 0.0
        np.testing.assert_allclose(weights.sum(axis=0), 1.0, atol=1e-9)

    def test_gradients(self):
        from sarl.gradcheck import check_gradients
        rng = np.random.default_rng(5)
        f_r = Tensor(rng.normal(size=(4, 5)))
        cls = ClassifierParams(Tensor(rng.normal(size=(5, 3))),
                               Tensor(rng.normal(size=3)))

        def loss():
            return T.sum_(T.pow_const(region_score_aggregate(f_r, cls), 2))

        check_gradients(loss, [f_r, cls.weights, cls.bias], tol=1e-4)


class TestForward:
    def test_zero_parameters_give_zero_logits(self):
        model = build_model(tiny_config(), seed=6)
        for t in model.parameters().values():
            t.data = np.zeros_like(t.data)
        rng = np.random.default_rng(7)
        out = forward(rng.normal(size=(4, 8)), model)
        np.testing.assert_array_equal(out.logits.data, np.zeros(3))

    def test_matches_straight_line_oracle(self):
        for seed in range(3):
            model = build_model(tiny_config(), seed=seed)
            rng = np.random.default_rng(100 + seed)
            x = rng.normal(size=(4, 8))
            y = np.array([1.0, 0.0, 1.0])
            out = forward(x, model, labels=y, train=True)
            z, l_ot = forward_oracle(x, model, y)
            np.testing.assert_allclose(out.logits.data, z, atol=1e-9)
            np.testing.assert_allclose(out.transport_cost.item(), l_ot, atol=1e-9)

    def test_train_mode_invariants(self):
        model = build_model(tiny_config(), seed=8)
        rng = np.random.default_rng(9)
        out = forward(rng.normal(size=(4, 8)), model,
                      labels=np.array([0.0, 1.0, 1.0]), train=True)
        theta, beta = out.theta.data, out.beta.data
        assert theta.min() >= 0 and beta.min() >= 0
        np.testing.assert_allclose(theta.sum(), 1.0, atol=1e-9)
        np.testing.assert_allclose(beta.sum(), 1.0, atol=1e-9)
        fwd, bwd = out.plans
        np.testing.assert_allclose(fwd.t.data.sum(axis=1), theta, atol=1e-9)
        np.testing.assert_allclose(bwd.t.data.sum(axis=0), beta, atol=1e-9)
        co = out.cost.data
        assert co.min() >= 0.0 and co.max() <= 2.0
        np.testing.assert_allclose(out.attention.data.sum(axis=1), 1.0, atol=1e-9)

    def test_deterministic(self):
        model = build_model(conv_config(), seed=10)
        rng = np.random.default_rng(11)
        img = rng.normal(size=(8, 8, 2))
        a = forward(img, model).logits.data
        b = forward(img, model).logits.data
        np.testing.assert_array_equal(a, b)

    def test_train_requires_labels(self):
        model = build_model(tiny_config(), seed=12)
        with pytest.raises(ValueError):
            forward(np.zeros((4, 8)), model, train=True)

    def test_infer_needs_no_labels(self):
        model = build_model(tiny_config(), seed=13)
        out = forward(np.random.default_rng(14).normal(size=(4, 8)), model)
        assert out.logits.shape == (3,)
        assert out.transport_cost is None
        assert out.semantic_map is None


class TestAblations:
    def test_disable_ot_bypasses_transport(self):
        model = build_model(tiny_config(disable_ot=True), seed=15)
        rng = np.random.default_rng(16)
        x = rng.normal(size=(4, 8))
        out = forward(x, model, labels=np.array([1.0, 0.0, 0.0]), train=True)
        assert out.attention is None
        assert out.transport_cost is None
        assert out.semantic_map is None
        assert out.aligned is out.features.f
        expect = region_score_aggregate(out.features.f, model.classifier).data
        np.testing.assert_array_equal(out.logits.data, expect)

    def test_disable_self_attn_keeps_encoder_output(self):
        model = build_model(tiny_config(disable_self_attn=True), seed=17)
        rng = np.random.default_rng(18)
        x = rng.normal(size=(4, 8))
        out = forward(x, model)
        np.testing.assert_array_equal(out.features.f.data, x)

    def test_disable_gsp_fusion_uses_zero_global_feature(self):
        from sarl.representation import fuse_semantic
        model = build_model(tiny_config(disable_gsp_fusion=True), seed=19)
        rng = np.random.default_rng(20)
        out = forward(rng.normal(size=(4, 8)), model)
        expect = fuse_semantic(Tensor(np.zeros(8)), model.labels, model.fusion)
        np.testing.assert_allclose(out.semantic_features.data, expect.data,
                                   atol=1e-12)


class TestCheckpoint:
    def roundtrip(self, tmp_path, cfg, seed=21):
        model = build_model(cfg, seed=seed, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        return model, load_checkpoint(path)

    def test_parameters_roundtrip_bit_exact(self, tmp_path):
        model, loaded = self.roundtrip(tmp_path, conv_config())
        for name, tensor in model.parameters().items():
            got = loaded.parameters()[name]
            assert got.data.dtype == np.float32
            np.testing.assert_array_equal(got.data, tensor.data)

    def test_forward_after_roundtrip_is_identical(self, tmp_path):
        model, loaded = self.roundtrip(tmp_path, conv_config())
        img = np.random.default_rng(22).normal(size=(8, 8, 2)).astype(np.float32)
        a = forward(img, model).logits.data
        b = forward(img, loaded).logits.data
        np.testing.assert_array_equal(a, b)

    def test_config_flags_roundtrip(self, tmp_path):
        cfg = conv_config(disable_ot=True, disable_gsp_fusion=True,
                          gsp_mode="max")
        _, loaded = self.roundtrip(tmp_path, cfg)
        assert loaded.config.disable_ot is True
        assert loaded.config.disable_gsp_fusion is True
        assert loaded.config.disable_self_attn is False
        assert loaded.config.gsp_mode == "max"
        assert loaded.config.encoder.grid_h == 2

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncation_rejected(self, tmp_path):
        model = build_model(conv_config(), seed=23, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 5])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_data_rejected(self, tmp_path):
        model = build_model(conv_config(), seed=24, dtype=np.float32)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            load_checkpoint(path)
