import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from seqformer import autodiff as ad
from seqformer.autodiff import ShapeError
from seqformer.data import WindowSpec
from seqformer.mae import (MAEConfig, MAEModel, VideoClip, encode, extract_features, load_mae, mae_forward,
                           masked_count, masked_targets, reconstruction_loss, sample_mask, save_mae, synth_clips,
                           tubelet_tokenize, tubelet_untokenize)
from seqformer.rng import Rng

from .conftest import randomize


class TestTokenize:
    def test_single_token(self, rng):
        clip = rng.normal(size=(2, 4, 4, 3))
        tokens = tubelet_tokenize(clip, 2, 4)
        assert tokens.shape == (1, 96)
        # one tubelet holds every voxel, ordered (t, row, col, channel)
        np.testing.assert_array_equal(tokens[0], clip.ravel())

    def test_count_fixture(self, rng):
        tokens = tubelet_tokenize(rng.normal(size=(4, 8, 8, 1)), 2, 4)
        assert tokens.shape == (8, 32)

    def test_raster_order(self):
        clip = np.zeros((4, 8, 8, 1))
        # mark tubelet (t=1, row=0, col=1) -> index 1*4 + 0*2 + 1 = 5
        clip[2:4, 0:4, 4:8] = 1.0
        tokens = tubelet_tokenize(clip, 2, 4)
        assert np.flatnonzero(tokens.sum(axis=1)).tolist() == [5]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 2), st.integers(1, 2),
           st.integers(1, 3))
    def test_round_trip(self, nt, nh, nw, tp, sp, c):
        shape = (nt * tp, nh * sp, nw * sp, c)
        clip = np.arange(np.prod(shape), dtype=np.float64).reshape(shape)
        tokens = tubelet_tokenize(clip, tp, sp)
        assert tokens.shape == (nt * nh * nw, tp * sp * sp * c)
        np.testing.assert_array_equal(tubelet_untokenize(tokens, shape, tp, sp), clip)

    @pytest.mark.parametrize("shape,name", [((5, 8, 8, 1), "T"), ((4, 6, 8, 1), "H"), ((4, 8, 10, 1), "W")])
    def test_divisibility_error_names_dimension(self, shape, name):
        with pytest.raises(ValueError, match=f"{name}="):
            tubelet_tokenize(np.zeros(shape), 2, 4)

    def test_video_clip_validation(self):
        with pytest.raises(ValueError):
            VideoClip(np.zeros((4, 8, 8)))
        assert tubelet_tokenize(VideoClip(np.zeros((2, 4, 4, 1))), 2, 4).shape == (1, 32)


class TestMask:
    def test_default_ratio_fixture(self):
        m = sample_mask(10, 0.9, seed=0)
        assert m.masked_indices.size == 9 and m.visible_indices.size == 1

    def test_deterministic(self):
        a, b = sample_mask(50, 0.9, 3), sample_mask(50, 0.9, 3)
        np.testing.assert_array_equal(a.masked_indices, b.masked_indices)
        assert not np.array_equal(a.masked_indices, sample_mask(50, 0.9, 4).masked_indices)

    @pytest.mark.parametrize("seed", range(1000))
    def test_partition(self, seed):
        n = 16 + seed % 200
        m = sample_mask(n, 0.9, seed)
        assert m.masked_indices.size == masked_count(n, 0.9)
        assert np.intersect1d(m.masked_indices, m.visible_indices).size == 0
        np.testing.assert_array_equal(np.union1d(m.masked_indices, m.visible_indices), np.arange(n))

    def test_round_half_up(self):
        assert masked_count(5, 0.9) == 5   # 4.5 -> 5
        assert masked_count(15, 0.9) == 14  # 13.5 -> 14
        assert masked_count(10, 0.5) == 5

    @pytest.mark.parametrize("n,ratio", [(4, 0.9), (10, 0.01), (1, 0.5), (10, 1.0), (10, 0.0)])
    def test_degenerate(self, n, ratio):
        with pytest.raises(ValueError):
            sample_mask(n, ratio)

    def test_uniform_over_positions(self):
        hits = np.zeros(20)
        for seed in range(2000):
            hits[sample_mask(20, 0.5, seed).masked_indices] += 1
        assert np.all(np.abs(hits / 2000 - 0.5) < 0.05)


class TestForward:
    def test_shapes(self, tiny_mae, tiny_mae_config, rng):
        tokens = rng.normal(size=(8, 32))
        mask = sample_mask(8, 0.75, 1)
        out = mae_forward(tiny_mae, tokens, mask)
        assert out.shape == (6, 32)
        assert mae_forward(tiny_mae, rng.normal(size=(3, 8, 32)), mask).shape == (3, 6, 32)

    def test_mask_mismatch(self, tiny_mae, rng):
        with pytest.raises(ShapeError):
            mae_forward(tiny_mae, rng.normal(size=(8, 32)), sample_mask(9, 0.5, 0))
        with pytest.raises(ShapeError):
            mae_forward(tiny_mae, rng.normal(size=(7, 32)), sample_mask(8, 0.5, 0))

    def test_ordered_by_masked_index(self, tiny_mae, rng):
        tokens = rng.normal(size=(8, 32))
        mask = sample_mask(8, 0.5, 2)
        out = mae_forward(tiny_mae, tokens, mask).data
        # decoder sees the whole grid; pick the same rows from a full decode
        full = sample_mask(8, 0.5, 2)
        np.testing.assert_array_equal(out, mae_forward(tiny_mae, tokens, full).data)
        assert out.shape[0] == mask.masked_indices.size

    def test_encoder_ignores_masked_values(self, tiny_mae, rng):
        tokens = rng.normal(size=(8, 32))
        mask = sample_mask(8, 0.75, 5)
        a = encode(tiny_mae, tokens, mask.visible_indices).data
        b_tokens = tokens.copy()
        b_tokens[mask.masked_indices] = rng.normal(size=(6, 32)) * 100
        b = encode(tiny_mae, b_tokens, mask.visible_indices).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("kind", ["l2", "mse"])
    def test_gradients_reach_everything(self, tiny_mae_config, kind):
        cfg = MAEConfig(**{**tiny_mae_config.to_dict(), "loss": kind})
        model = randomize(MAEModel(cfg, Rng(3)), Rng(4))
        tokens = Rng(5).normal(size=(2, 8, 32))
        mask = sample_mask(8, 0.75, 6)
        target = masked_targets(tokens, mask)
        params = model.parameters()
        err = ad.gradcheck(lambda: reconstruction_loss(target, mae_forward(model, tokens, mask), kind), params)
        assert err < 1e-4
        for p in (model.mask_token, model.patch_embed.weight, model.reconstruct.weight, model.encoder[0].ffn1.weight):
            assert np.any(p.grad != 0)


class TestLoss:
    def test_zero(self, rng):
        x = rng.normal(size=(4, 6))
        assert reconstruction_loss(x, x.copy()).data == 0.0

    def test_norm_fixture(self):
        assert reconstruction_loss(np.array([[3.0, 4.0]]), np.zeros((1, 2))).data == 5.0

    def test_mean_of_norms_fixture(self):
        x = np.array([[3.0, 4.0], [1.0, 1.0]])
        xh = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert reconstruction_loss(x, xh).data == 2.5

    def test_mse_flag(self):
        assert reconstruction_loss(np.array([[3.0, 4.0]]), np.zeros((1, 2)), "mse").data == 12.5

    def test_permutation_invariant(self, rng):
        x, xh = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
        perm = rng.permutation(7)
        a = reconstruction_loss(x, xh).data
        b = reconstruction_loss(x[perm], xh[perm]).data
        assert a == pytest.approx(b, rel=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            reconstruction_loss(np.zeros((2, 3)), np.zeros((3, 3)))

    def test_zero_difference_subgradient(self):
        x = ad.parameter(np.ones((2, 3)))
        ad.backward(reconstruction_loss(np.ones((2, 3)), x))
        np.testing.assert_array_equal(x.grad, 0.0)


class TestExtract:
    def test_dimension_and_rows(self, tiny_mae, rng):
        seq = extract_features(tiny_mae, rng.normal(size=(8, 8, 8, 1)), source_id="c", label=1)
        # two 4-frame segments, two temporal slices each
        assert seq.values.shape == (4, 8) and seq.label == 1 and seq.source_id == "c"

    def test_deterministic(self, tiny_mae, rng):
        clip = rng.normal(size=(4, 8, 8, 1))
        np.testing.assert_array_equal(extract_features(tiny_mae, clip).values,
                                      extract_features(tiny_mae, clip.copy()).values)

    def test_constant_clip_constant_rows(self, tiny_mae_config):
        model = randomize(MAEModel(tiny_mae_config, Rng(1)), Rng(2))
        rows = extract_features(model, np.full((8, 8, 8, 1), 0.3)).values
        np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), rtol=0, atol=1e-9)

    def test_short_clip_and_window_mismatch(self, tiny_mae, rng):
        with pytest.raises(ShapeError):
            extract_features(tiny_mae, rng.normal(size=(2, 8, 8, 1)))
        with pytest.raises(ValueError):
            extract_features(tiny_mae, rng.normal(size=(8, 8, 8, 1)), WindowSpec(L=2))
        with pytest.raises(ShapeError):
            extract_features(tiny_mae, rng.normal(size=(4, 8, 4, 1)))


def test_synth_clips_deterministic_and_shaped():
    a = synth_clips(0, 3, 4, 8, 8, 1)
    assert a.shape == (3, 4, 8, 8, 1)
    np.testing.assert_array_equal(a, synth_clips(0, 3, 4, 8, 8, 1))
    still = synth_clips(1, 1, 6, 16, 16, 1, labels=[0])[0]
    # class 0 blobs do not move: frames differ only by the pixel noise
    assert np.abs(still[0] - still[-1]).max() < 0.2


def test_checkpoint_round_trip(tmp_path, tiny_mae_config, rng):
    model = randomize(MAEModel(tiny_mae_config, Rng(1)), Rng(2))
    save_mae(tmp_path / "m.ckpt", model, {"seed": 4})
    loaded, extra = load_mae(tmp_path / "m.ckpt")
    assert extra == {"seed": 4} and loaded.config == model.config
    assert (tmp_path / "m.ckpt").read_bytes()[:4] == b"MAES"
    clip = rng.normal(size=(4, 8, 8, 1))
    np.testing.assert_array_equal(extract_features(loaded, clip).values, extract_features(model, clip).values)
