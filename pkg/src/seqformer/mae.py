"""Desk-scale masked autoencoder for video clips.

Clips are ``T x H x W x C`` arrays cut into tubelets of
``t_patch x s_patch x s_patch x C`` voxels, raster-ordered time-major, then
row, then column. Pretraining hides a random 90% of the tubelets, encodes
the visible ones and asks a light decoder to reconstruct the hidden ones.
After pretraining the encoder alone (no masking) turns clips into one
feature vector per temporal slice.

The encoder adds a sinusoidal code of each token's *spatial* slot only, so
a clip that does not change over time yields identical rows; the decoder
adds a code of the full token index so it can place its reconstructions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .convtrans import MultiHeadAttention
from .data import FeatureSequence, WindowSpec, window_array
from .encodings import sinusoidal_table
from .nn import LayerNorm, Linear, Module
from .optim import CosineSchedule, Optimizer, OptimizerConfig, PRETRAIN_ADAMW
from .rng import Rng
from .serialization import read_container, write_container

MAGIC = b"MAES"


@dataclass
class VideoClip:
    frames: np.ndarray
    fps: float = 25.0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or min(self.frames.shape) < 1:
            raise ValueError(f"clip must be T x H x W x C with positive extents, got {self.frames.shape}")


@dataclass
class MaskSpec:
    ratio: float
    rng_seed: int
    masked_indices: np.ndarray
    visible_indices: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.masked_indices.size + self.visible_indices.size


@dataclass
class MAEConfig:
    frames: int = 16
    height: int = 32
    width: int = 32
    channels: int = 1
    t_patch: int = 2
    s_patch: int = 8
    d_enc: int = 32
    enc_layers: int = 2
    enc_heads: int = 4
    enc_ffn: int = 64
    d_dec: int = 32
    dec_layers: int = 1
    dec_heads: int = 4
    dec_ffn: int = 64
    mask_ratio: float = 0.9
    loss: str = "l2"

    def __post_init__(self):
        _check_divisible((self.frames, self.height, self.width), self.t_patch, self.s_patch)
        if self.loss not in ("l2", "mse"):
            raise ValueError(f"loss must be 'l2' or 'mse', got {self.loss!r}")

    @property
    def grid(self) -> tuple[int, int, int]:
        return self.frames // self.t_patch, self.height // self.s_patch, self.width // self.s_patch

    @property
    def n_tokens(self) -> int:
        nt, nh, nw = self.grid
        return nt * nh * nw

    @property
    def token_dim(self) -> int:
        return self.t_patch * self.s_patch * self.s_patch * self.channels

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MAEConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _check_divisible(thw, t_patch: int, s_patch: int) -> None:
    for name, size, patch in zip(("T", "H", "W"), thw, (t_patch, s_patch, s_patch)):
        if patch < 1 or size % patch:
            raise ValueError(f"{name}={size} is not divisible by patch size {patch}")


# -- tokenization ---------------------------------------------------------

def tubelet_tokenize(clip, t_patch: int, s_patch: int) -> np.ndarray:
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip)
    T, H, W, C = frames.shape
    _check_divisible((T, H, W), t_patch, s_patch)
    nt, nh, nw = T // t_patch, H // s_patch, W // s_patch
    x = frames.reshape(nt, t_patch, nh, s_patch, nw, s_patch, C)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)
    return x.reshape(nt * nh * nw, t_patch * s_patch * s_patch * C)


def tubelet_untokenize(tokens: np.ndarray, shape, t_patch: int, s_patch: int) -> np.ndarray:
    T, H, W, C = shape
    nt, nh, nw = T // t_patch, H // s_patch, W // s_patch
    x = np.asarray(tokens).reshape(nt, nh, nw, t_patch, s_patch, s_patch, C)
    return x.transpose(0, 3, 1, 4, 2, 5, 6).reshape(T, H, W, C)


# -- masking --------------------------------------------------------------

def masked_count(n_tokens: int, ratio: float) -> int:
    """``round(ratio * n_tokens)`` with halves rounded up."""
    return int(math.floor(ratio * n_tokens + 0.5))


def sample_mask(n_tokens: int, ratio: float = 0.9, seed: int = 0) -> MaskSpec:
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_tokens < 2:
        raise ValueError("need at least 2 tokens to mask")
    k = masked_count(n_tokens, ratio)
    if k == 0 or k == n_tokens:
        raise ValueError(f"ratio {ratio} over {n_tokens} tokens leaves {n_tokens - k} visible and {k} masked")
    perm = Rng.for_stage(seed, "mask").permutation(n_tokens)
    return MaskSpec(ratio, seed, np.sort(perm[:k]), np.sort(perm[k:]))


# -- model ----------------------------------------------------------------

class EncoderLayer(Module):
    """Pre-norm transformer layer with plain scaled dot-product attention."""

    def __init__(self, d: int, heads: int, ffn: int, rng, dtype=np.float64):
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, heads, None, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ffn1 = Linear(d, ffn, rng, dtype=dtype)
        self.ffn2 = Linear(ffn, d, rng, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        h = x + self.attn(self.norm1(x))
        return h + self.ffn2(ad.gelu(self.ffn1(self.norm2(h))))


class MAEModel(Module):
    def __init__(self, cfg: MAEConfig, rng, dtype=np.float64):
        self.config = cfg
        self.patch_embed = Linear(cfg.token_dim, cfg.d_enc, rng, dtype=dtype)
        self.encoder = [EncoderLayer(cfg.d_enc, cfg.enc_heads, cfg.enc_ffn, rng, dtype) for _ in range(cfg.enc_layers)]
        self.enc_norm = LayerNorm(cfg.d_enc, dtype=dtype)
        self.enc_to_dec = Linear(cfg.d_enc, cfg.d_dec, rng, dtype=dtype)
        self.mask_token = ad.parameter(0.02 * rng.normal(size=(cfg.d_dec,)), dtype=dtype)
        self.decoder = [EncoderLayer(cfg.d_dec, cfg.dec_heads, cfg.dec_ffn, rng, dtype) for _ in range(cfg.dec_layers)]
        self.dec_norm = LayerNorm(cfg.d_dec, dtype=dtype)
        self.reconstruct = Linear(cfg.d_dec, cfg.token_dim, rng, dtype=dtype)
        nt, nh, nw = cfg.grid
        spatial = sinusoidal_table(nh * nw, cfg.d_enc)
        self.enc_pos = np.tile(spatial, (nt, 1))          # (N, d_enc), repeats every slice
        self.dec_pos = sinusoidal_table(cfg.n_tokens, cfg.d_dec)

    @property
    def dtype(self):
        return self.mask_token.dtype


def _tokens_tensor(model: MAEModel, tokens) -> Tensor:
    x = ad.as_tensor(tokens, dtype=model.dtype)
    cfg = model.config
    if x.shape[-2:] != (cfg.n_tokens, cfg.token_dim):
        raise ShapeError(f"expected (..., {cfg.n_tokens}, {cfg.token_dim}) tokens, got {x.shape}")
    return x


def encode(model: MAEModel, tokens, visible=None) -> Tensor:
    """Encoder outputs for the visible tokens (all tokens when ``visible`` is None)."""
    x = _tokens_tensor(model, tokens)
    pos = model.enc_pos
    if visible is not None:
        x = ad.gather(x, visible, axis=-2)
        pos = pos[visible]
    h = model.patch_embed(x) + pos.astype(x.dtype)
    for layer in model.encoder:
        h = layer(h)
    return model.enc_norm(h)


def mae_forward(model: MAEModel, tokens, mask: MaskSpec) -> Tensor:
    """Reconstructions of the masked tokens, ordered by masked index."""
    x = _tokens_tensor(model, tokens)
    if mask.n_tokens != model.config.n_tokens:
        raise ShapeError(f"mask covers {mask.n_tokens} tokens, model expects {model.config.n_tokens}")
    enc = model.enc_to_dec(encode(model, x, mask.visible_indices))
    n_masked = mask.masked_indices.size
    fill = model.mask_token * np.ones(enc.shape[:-2] + (n_masked, 1), dtype=x.dtype)
    order = np.concatenate([mask.visible_indices, mask.masked_indices])
    full = ad.gather(ad.concat([enc, fill], axis=-2), np.argsort(order), axis=-2)
    h = full + model.dec_pos.astype(x.dtype)
    for layer in model.decoder:
        h = layer(h)
    pred = model.reconstruct(model.dec_norm(h))
    return ad.gather(pred, mask.masked_indices, axis=-2)


def reconstruction_loss(x_m, x_m_hat, kind: str = "l2") -> Tensor:
    """Mean over tokens of ``||x_m - x_m_hat||_2`` (``kind="mse"``: mean squared error)."""
    x_m = ad.as_tensor(x_m)
    x_m_hat = ad.as_tensor(x_m_hat, dtype=x_m.dtype)
    if x_m.shape != x_m_hat.shape:
        raise ShapeError(f"reconstruction shape mismatch: {x_m.shape} vs {x_m_hat.shape}")
    if x_m.ndim < 2 or x_m.shape[-2] < 1:
        raise ShapeError("need at least one token")
    diff = x_m - x_m_hat
    if kind == "l2":
        return ad.mean(ad.l2_norm(diff, axis=-1))
    if kind == "mse":
        return ad.mean(ad.square(diff))
    raise ValueError(f"unknown reconstruction loss {kind!r}")


def masked_targets(tokens: np.ndarray, mask: MaskSpec) -> np.ndarray:
    return np.take(np.asarray(tokens), mask.masked_indices, axis=-2)


# -- pretraining and feature extraction -----------------------------------

_CLASS_SPEEDS = (0.0, 0.4, 0.8)  # blob speed in pixels per frame, by class


def synth_clips(seed: int, n: int, frames: int = 16, height: int = 32, width: int = 32,
                channels: int = 1, labels=None) -> np.ndarray:
    """``(n, T, H, W, C)`` clips of a Gaussian blob drifting over a flat background.

    With ``labels`` the blob speed is fixed by class (still, slow, fast) and
    only its direction is random.
    """
    rng = Rng.for_stage(seed, "synth:clips")
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    clips = np.empty((n, frames, height, width, channels))
    for i in range(n):
        background = rng.uniform(0.2, 0.8)
        amp = rng.uniform(0.5, 1.5)
        sigma = rng.uniform(3.0, 6.0)
        cy, cx = rng.uniform(0.25, 0.75) * height, rng.uniform(0.25, 0.75) * width
        vy, vx = rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6)
        if labels is not None:
            angle = rng.uniform(0.0, 2 * np.pi)
            speed = _CLASS_SPEEDS[int(labels[i])]
            vy, vx = speed * np.sin(angle), speed * np.cos(angle)
        tint = rng.uniform(0.7, 1.0, size=(channels,))
        for t in range(frames):
            blob = amp * np.exp(-((yy - cy - vy * t) ** 2 + (xx - cx - vx * t) ** 2) / (2 * sigma ** 2))
            clips[i, t] = background + blob[..., None] * tint
        clips[i] += 0.02 * rng.normal(size=clips[i].shape)
    return clips


def pretrain(model: MAEModel, clips: np.ndarray, steps: int, seed: int,
             opt: OptimizerConfig = PRETRAIN_ADAMW, batch_size: int = 8,
             warmup_steps: int = 0, on_step=None) -> list[float]:
    """AdamW + cosine decay on masked reconstruction; returns per-step losses.

    Each step draws a batch of clips and one mask shared by the batch, both
    from streams derived from ``seed``.
    """
    cfg = model.config
    tokens = np.stack([tubelet_tokenize(c, cfg.t_patch, cfg.s_patch) for c in clips]).astype(model.dtype)
    optimizer = Optimizer(model.parameters(), opt)
    schedule = CosineSchedule(opt.base_lr, steps, warmup_steps)
    batch_rng = Rng.for_stage(seed, "mae:batches")
    mask_rng = Rng.for_stage(seed, "mae:masks")
    losses = []
    for step in range(steps):
        idx = batch_rng.choice(len(tokens), min(batch_size, len(tokens)))
        mask = sample_mask(cfg.n_tokens, cfg.mask_ratio, int(mask_rng.raw(1)[0]))
        batch = tokens[idx]
        optimizer.zero_grad()
        pred = mae_forward(model, batch, mask)
        loss = ad.check_finite(reconstruction_loss(masked_targets(batch, mask), pred, cfg.loss), "reconstruction loss")
        ad.backward(loss)
        optimizer.step(lr=schedule.lr_at(step))
        losses.append(float(loss.data))
        if on_step is not None:
            on_step(step, losses[-1], schedule.lr_at(step))
    return losses


def extract_features(model: MAEModel, clip, window: WindowSpec | None = None,
                     source_id: str = "", label: int | None = None) -> FeatureSequence:
    """Unmasked encoder pass over each frame segment; one row per temporal slice.

    Segments are ``model.config.frames`` frames long (``window`` may change
    the stride and tail policy). Encoder tokens of a slice are mean-pooled.
    """
    cfg = model.config
    frames = clip.frames if isinstance(clip, VideoClip) else np.asarray(clip, dtype=np.float64)
    if frames.shape[1:] != (cfg.height, cfg.width, cfg.channels):
        raise ShapeError(f"clip frames {frames.shape[1:]} do not match model {(cfg.height, cfg.width, cfg.channels)}")
    window = window or WindowSpec(L=cfg.frames)
    if window.L != cfg.frames:
        raise ValueError(f"feature windows must span {cfg.frames} frames, got {window.L}")
    segments = window_array(frames, window)
    if not segments:
        raise ShapeError(f"clip has {frames.shape[0]} frames, fewer than one {cfg.frames}-frame segment")
    tokens = np.stack([tubelet_tokenize(s, cfg.t_patch, cfg.s_patch) for s in segments])
    enc = encode(model, tokens).data
    nt, nh, nw = cfg.grid
    per_slice = enc.reshape(len(segments), nt, nh * nw, cfg.d_enc).mean(axis=2)
    return FeatureSequence(per_slice.reshape(-1, cfg.d_enc), label, source_id)


def save_mae(path, model: MAEModel, extra: dict | None = None) -> None:
    write_container(path, MAGIC, {"mae": model.config.to_dict(), "extra": extra or {}}, model.state_arrays())


def load_mae(path) -> tuple[MAEModel, dict]:
    def shapes(config):
        return [p.shape for p in MAEModel(MAEConfig.from_dict(config["mae"]), Rng(0)).parameters()]

    config, arrays = read_container(path, MAGIC, shapes)
    model = MAEModel(MAEConfig.from_dict(config["mae"]), Rng(0))
    model.load_arrays(arrays)
    return model, config.get("extra", {})
