import math
import struct

import numpy as np
import pytest
from scipy.special import erf

from seqformer import autodiff as ad
from seqformer.autodiff import ShapeError
from seqformer.convtrans import (ConvTransConfig, ConvTransModel, embed, forward, head, layer_forward, load_model,
                                 parameter_count, predict, save_model)
from seqformer.encodings import erpe_index_map
from seqformer.optim import cross_entropy
from seqformer.rng import Rng
from seqformer.serialization import CheckpointError

from .conftest import randomize


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_layer(x, layer, heads):
    """Straight-line numpy evaluation of one residual layer on an (L, d) input."""
    L, d = x.shape
    dh = d // heads
    h1 = np_layer_norm(x, layer.norm1.gamma.data, layer.norm1.beta.data)
    qkv = h1 @ layer.attn.qkv.weight.data + layer.attn.qkv.bias.data
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    idx = erpe_index_map(L) - 1
    z = np.zeros((L, d))
    for hd in range(heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        e = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        a = np.exp(e - e.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        if layer.attn.erpe is not None:
            a = a + layer.attn.erpe.w.data[hd][idx]
        z[:, sl] = a @ v[:, sl]
    h = x + z @ layer.attn.out.weight.data + layer.attn.out.bias.data
    f = np_layer_norm(h, layer.norm2.gamma.data, layer.norm2.beta.data)
    f = f @ layer.ffn1.weight.data + layer.ffn1.bias.data
    f = f * 0.5 * (1 + erf(f / math.sqrt(2)))
    y = h + f @ layer.ffn2.weight.data + layer.ffn2.bias.data
    if layer.skip is not None:
        y = y + x @ layer.skip.weight.data
    return y


def zero_layer_weights(model, keep_skip=False):
    for layer in model.layers:
        for p in layer.parameters():
            if keep_skip and layer.skip is not None and p is layer.skip.weight:
                continue
            p.data = np.zeros_like(p.data)


class TestConfig:
    def test_defaults(self):
        cfg = ConvTransConfig(input_dim=32)
        assert (cfg.num_layers, cfg.num_heads, cfg.ffn_dim, cfg.segment_len, cfg.num_classes) == (8, 8, 256, 16, 3)

    @pytest.mark.parametrize("kw", [dict(d_model=30, num_heads=8), dict(d_model=9, num_heads=3),
                                    dict(dropout=1.0), dict(num_layers=0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ConvTransConfig(input_dim=4, **kw)

    def test_dict_round_trip(self):
        cfg = ConvTransConfig(input_dim=4, d_model=16, use_erpe=False)
        assert ConvTransConfig.from_dict(cfg.to_dict()) == cfg


class TestParameterCount:
    @pytest.mark.parametrize("kw", [
        dict(),
        dict(d_model=32),
        dict(use_erpe=False),
        dict(skip=False, use_tape=False),
        dict(d_model=16, num_layers=3, num_heads=4, ffn_dim=40, segment_len=9, conv_kernel=5, num_classes=4),
    ])
    def test_closed_form_matches_model(self, kw):
        cfg = ConvTransConfig(input_dim=32, **kw)
        assert ConvTransModel(cfg, Rng(0)).num_parameters() == parameter_count(cfg)

    def test_default_value(self):
        # D=32, d=64, K=3, f=256, H=8, L=16, M=3
        d, f = 64, 256
        embed_n = 32 * d * 3 + d
        layer = 2 * d + 3 * d * d + 3 * d + d * d + d + 2 * d + 2 * d * f + f + d + 8 * 31 + d * d
        expected = embed_n + 8 * layer + 2 * d + 2 * d * 3 + 3
        assert expected == 441_347
        assert parameter_count(ConvTransConfig(input_dim=32)) == expected

    def test_erpe_length_per_head_per_layer(self):
        model = ConvTransModel(ConvTransConfig(input_dim=4, d_model=16, segment_len=16), Rng(0))
        for layer in model.layers:
            assert layer.attn.erpe.w.shape == (8, 31)


class TestEmbed:
    def test_zero_series_gives_table(self):
        model = ConvTransModel(ConvTransConfig(input_dim=3, d_model=8, num_layers=1, num_heads=2, segment_len=5), Rng(0))
        np.testing.assert_array_equal(embed(np.zeros((5, 3)), model).data, model.tape.table)

    def test_unit_kernel(self, rng):
        cfg = ConvTransConfig(input_dim=1, d_model=4, num_layers=1, num_heads=2, segment_len=6, conv_kernel=1)
        model = ConvTransModel(cfg, Rng(0))
        proj = np.array([1.0, -2.0, 0.5, 3.0])
        model.conv_kernels.data = proj.reshape(4, 1, 1)
        x = rng.normal(size=(6, 1))
        np.testing.assert_allclose(embed(x, model).data, x * proj + model.tape.table, atol=1e-15)

    def test_shape_and_errors(self, tiny_convtrans, rng):
        assert embed(rng.normal(size=(4, 3)), tiny_convtrans).shape == (4, 8)
        assert embed(rng.normal(size=(5, 4, 3)), tiny_convtrans).shape == (5, 4, 8)
        with pytest.raises(ShapeError):
            embed(rng.normal(size=(5, 3)), tiny_convtrans)
        with pytest.raises(ShapeError):
            embed(rng.normal(size=(4, 2)), tiny_convtrans)


class TestLayer:
    def test_zero_weights_identity(self, tiny_convtrans, rng):
        zero_layer_weights(tiny_convtrans)
        x = rng.normal(size=(4, 8))
        for layer in tiny_convtrans.layers:
            np.testing.assert_array_equal(layer_forward(x, layer).data, x)

    def test_zero_block_keeps_skip_path(self, tiny_convtrans, rng):
        zero_layer_weights(tiny_convtrans, keep_skip=True)
        x = rng.normal(size=(4, 8))
        np.testing.assert_array_equal(layer_forward(x, tiny_convtrans.layers[0]).data, 2 * x)

    @pytest.mark.parametrize("use_erpe,skip", [(True, True), (False, False), (True, False)])
    def test_composition_oracle(self, rng, use_erpe, skip):
        cfg = ConvTransConfig(input_dim=3, d_model=8, num_layers=1, num_heads=2, ffn_dim=12, segment_len=5,
                              use_erpe=use_erpe, skip=skip)
        model = randomize(ConvTransModel(cfg, Rng(2)), Rng(3))
        x = rng.normal(size=(5, 8))
        np.testing.assert_allclose(layer_forward(x, model.layers[0]).data, np_layer(x, model.layers[0], 2),
                                   rtol=0, atol=1e-10)

    def test_shape_preserved_through_default_stack(self, rng):
        model = ConvTransModel(ConvTransConfig(input_dim=4, d_model=16), Rng(0))
        tokens = embed(rng.normal(size=(16, 4)), model)
        for layer in model.layers:
            tokens = layer_forward(tokens, layer)
            assert tokens.shape == (16, 16)


class TestHead:
    def test_constant_tokens(self, tiny_convtrans):
        c = -0.4
        tokens = np.full((4, 8), c)
        a = ad.elu(tokens)
        mx, mn = ad.pool(a, "max_over_time").data, ad.pool(a, "mean_over_time").data
        np.testing.assert_array_equal(mx, mn)
        np.testing.assert_allclose(mx, math.exp(c) - 1, atol=1e-15)
        w, b = tiny_convtrans.classifier.weight.data, tiny_convtrans.classifier.bias.data
        np.testing.assert_allclose(head(tokens, tiny_convtrans).data, np.concatenate([mx, mn]) @ w + b, atol=1e-14)

    def test_zero_weights(self, tiny_convtrans, rng):
        tiny_convtrans.classifier.weight.data[:] = 0
        tiny_convtrans.classifier.bias.data[:] = 0
        np.testing.assert_array_equal(head(rng.normal(size=(4, 8)), tiny_convtrans).data, 0.0)

    def test_hand_sized(self):
        cfg = ConvTransConfig(input_dim=1, d_model=2, num_layers=1, num_heads=1, segment_len=2, num_classes=2)
        model = ConvTransModel(cfg, Rng(0))
        model.classifier.weight.data = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0]])
        model.classifier.bias.data = np.array([0.5, -0.5])
        tokens = np.array([[1.0, -1.0], [2.0, 0.0]])
        # ELU -> [[1, e^-1 - 1], [2, 0]]; max [2, 0]; mean [1.5, (e^-1 - 1) / 2]
        em = math.exp(-1) - 1
        pooled = np.array([2.0, 0.0, 1.5, em / 2])
        expected = np.array([2.0 + 1.5 + 2 * em / 2 + 0.5, 0.0 + 1.5 - em / 2 - 0.5])
        np.testing.assert_allclose(head(tokens, model).data, expected, atol=1e-15)
        np.testing.assert_allclose(pooled @ model.classifier.weight.data + model.classifier.bias.data, expected)


class TestForward:
    def test_logit_shape(self, rng):
        model = ConvTransModel(ConvTransConfig(input_dim=4, d_model=16), Rng(0))
        assert forward(model, rng.normal(size=(16, 4))).shape == (3,)
        assert forward(model, rng.normal(size=(2, 16, 4))).shape == (2, 3)

    def test_deterministic(self, tiny_convtrans, rng):
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(forward(tiny_convtrans, x).data, forward(tiny_convtrans, x.copy()).data)

    def test_batch_matches_single(self, tiny_convtrans, rng):
        x = rng.normal(size=(3, 4, 3))
        batch = forward(tiny_convtrans, x).data
        for i in range(3):
            np.testing.assert_allclose(forward(tiny_convtrans, x[i]).data, batch[i], atol=1e-13)

    def test_dropout_needs_rng_and_is_seeded(self, rng):
        cfg = ConvTransConfig(input_dim=3, d_model=8, num_layers=2, num_heads=2, segment_len=4, dropout=0.3)
        model = ConvTransModel(cfg, Rng(0))
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(forward(model, x).data, forward(model, x).data)
        a = forward(model, x, Rng(5)).data
        np.testing.assert_array_equal(a, forward(model, x, Rng(5)).data)
        assert not np.allclose(a, forward(model, x).data)

    def test_gradient_every_parameter_group(self, tiny_convtrans):
        model = randomize(tiny_convtrans, Rng(8))
        x = Rng(9).normal(size=(2, 4, 3))
        y = np.array([0, 2])
        err = ad.gradcheck(lambda: cross_entropy(forward(model, x), y), model.parameters())
        assert err < 1e-4

    def test_residual_identity(self, tiny_convtrans, rng):
        zero_layer_weights(tiny_convtrans)
        x = rng.normal(size=(4, 3))
        tokens = embed(x, tiny_convtrans)
        expected = head(tiny_convtrans.final_norm(tokens), tiny_convtrans).data
        np.testing.assert_array_equal(forward(tiny_convtrans, x).data, expected)

    def test_predict(self, tiny_convtrans, rng):
        x = rng.normal(size=(7, 4, 3))
        np.testing.assert_array_equal(predict(tiny_convtrans, x, batch_size=3),
                                      np.argmax(forward(tiny_convtrans, x).data, axis=-1))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_convtrans, rng):
        randomize(tiny_convtrans, Rng(1))
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_convtrans, {"note": "x"})
        loaded, extra = load_model(path)
        assert extra == {"note": "x"}
        assert loaded.config == tiny_convtrans.config
        for a, b in zip(loaded.parameters(), tiny_convtrans.parameters()):
            np.testing.assert_array_equal(a.data, b.data)
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(forward(loaded, x).data, forward(tiny_convtrans, x).data)

    def test_layout(self, tmp_path, tiny_convtrans):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_convtrans)
        raw = path.read_bytes()
        assert raw[:4] == b"CTRS"
        assert struct.unpack_from("<I", raw, 4)[0] == 1
        n = struct.unpack_from("<I", raw, 8)[0]
        count = struct.unpack_from("<I", raw, 12 + n)[0]
        assert count == len(tiny_convtrans.parameters())
        first = np.frombuffer(raw, dtype="<f8", count=tiny_convtrans.conv_kernels.size, offset=16 + n)
        np.testing.assert_array_equal(first, tiny_convtrans.conv_kernels.data.ravel())
        assert len(raw) == 16 + n + 8 * tiny_convtrans.num_parameters()

    @pytest.mark.parametrize("corrupt", ["magic", "version", "truncate", "trailing"])
    def test_rejects_corruption(self, tmp_path, tiny_convtrans, corrupt):
        path = tmp_path / "m.ckpt"
        save_model(path, tiny_convtrans)
        raw = bytearray(path.read_bytes())
        if corrupt == "magic":
            raw[:4] = b"MAES"
        elif corrupt == "version":
            raw[4:8] = struct.pack("<I", 2)
        elif corrupt == "truncate":
            raw = raw[:-8]
        else:
            raw += b"\0"
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_model(path)
