"""Residual ConvTrans classifier.

Pipeline for one ``L x D`` feature window::

    conv1d embedding (same padding) -> + tAPE table
    -> num_layers x [pre-norm eRPE attention, pre-norm GELU FFN, skip path]
    -> layer norm -> ELU -> concat(max over time, mean over time) -> linear -> logits

The skip path is a bias-free linear map from a layer's input to its output,
initialized to the identity, so each layer computes
``block(x) + x @ S`` with ``S = I`` at start. Setting ``skip=False`` drops it
and leaves a plain pre-norm transformer stack.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encodings import ERPEWeights, add_ape, build_tape_table, erpe_attention
from .nn import LayerNorm, Linear, Module
from .serialization import read_container, write_container

MAGIC = b"CTRS"


@dataclass
class ConvTransConfig:
    input_dim: int
    d_model: int = 64
    num_layers: int = 8
    num_heads: int = 8
    ffn_dim: int = 256
    segment_len: int = 16
    num_classes: int = 3
    conv_kernel: int = 3
    dropout: float = 0.0
    use_tape: bool = True
    use_erpe: bool = True
    skip: bool = True

    def __post_init__(self):
        if self.d_model % self.num_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the position table")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        for name in ("input_dim", "num_layers", "num_heads", "ffn_dim", "segment_len", "num_classes", "conv_kernel"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ConvTransConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def parameter_count(cfg: ConvTransConfig) -> int:
    """Closed form; must agree with ``ConvTransModel(cfg).num_parameters()``."""
    d, f, L, H = cfg.d_model, cfg.ffn_dim, cfg.segment_len, cfg.num_heads
    embed = cfg.input_dim * d * cfg.conv_kernel + d
    per_layer = (
        2 * d                      # pre-attention norm
        + d * 3 * d + 3 * d        # fused q/k/v projection
        + d * d + d                # output projection
        + 2 * d                    # pre-FFN norm
        + d * f + f + f * d + d    # FFN
    )
    if cfg.use_erpe:
        per_layer += H * (2 * L - 1)
    if cfg.skip:
        per_layer += d * d
    final_norm = 2 * d
    head = 2 * d * cfg.num_classes + cfg.num_classes
    return embed + cfg.num_layers * per_layer + final_norm + head


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, L: int | None, rng, dtype=np.float64):
        self.num_heads = num_heads
        self.qkv = Linear(d_model, 3 * d_model, rng, dtype=dtype)
        self.out = Linear(d_model, d_model, rng, dtype=dtype)
        self.erpe = ERPEWeights(num_heads, L, dtype=dtype) if L is not None else None

    def __call__(self, x: Tensor) -> Tensor:
        *lead, L, d = x.shape
        nb, h = len(lead), self.num_heads
        lead_axes = tuple(range(nb))
        # (..., L, 3, h, dh) -> (3, ..., h, L, dh)
        qkv = self.qkv(x).reshape(*lead, L, 3, h, d // h).transpose((nb + 1,) + lead_axes + (nb + 2, nb, nb + 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        w = self.erpe.w if self.erpe is not None else None
        z = erpe_attention(q, k, v, w)
        return self.out(z.transpose(lead_axes + (nb + 1, nb, nb + 2)).reshape(*lead, L, d))


class ConvTransLayer(Module):
    def __init__(self, cfg: ConvTransConfig, rng, dtype=np.float64, use_erpe=None, skip=None):
        d = cfg.d_model
        use_erpe = cfg.use_erpe if use_erpe is None else use_erpe
        skip = cfg.skip if skip is None else skip
        self.norm1 = LayerNorm(d, dtype=dtype)
        self.attn = MultiHeadAttention(d, cfg.num_heads, cfg.segment_len if use_erpe else None, rng, dtype=dtype)
        self.norm2 = LayerNorm(d, dtype=dtype)
        self.ffn1 = Linear(d, cfg.ffn_dim, rng, dtype=dtype)
        self.ffn2 = Linear(cfg.ffn_dim, d, rng, dtype=dtype)
        self.skip = None
        if skip:
            self.skip = Linear(d, d, rng, bias=False, dtype=dtype)
            self.skip.weight.data = np.eye(d, dtype=dtype)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, rng=None) -> Tensor:
        # dropout only when a training rng is supplied
        rate = self.dropout if rng is not None else 0.0
        h = x + ad.dropout(self.attn(self.norm1(x)), rate, rng)
        y = h + ad.dropout(self.ffn2(ad.gelu(self.ffn1(self.norm2(h)))), rate, rng)
        if self.skip is not None:
            y = y + self.skip(x)
        return y


class ConvTransModel(Module):
    def __init__(self, cfg: ConvTransConfig, rng, dtype=np.float64):
        self.config = cfg
        d, k = cfg.d_model, cfg.conv_kernel
        bound = 1.0 / math.sqrt(cfg.input_dim * k)
        self.conv_kernels = ad.parameter(rng.uniform(-bound, bound, size=(d, cfg.input_dim, k)), dtype=dtype)
        self.conv_bias = ad.parameter(np.zeros(d), dtype=dtype)
        self.tape = build_tape_table(cfg.segment_len, d)
        self.layers = [ConvTransLayer(cfg, rng, dtype=dtype) for _ in range(cfg.num_layers)]
        self.final_norm = LayerNorm(d, dtype=dtype)
        self.classifier = Linear(2 * d, cfg.num_classes, rng, dtype=dtype)

    @property
    def dtype(self):
        return self.conv_kernels.dtype

    def __call__(self, series, rng=None) -> Tensor:
        return forward(self, series, rng)


def _as_batch(series, model: ConvTransModel) -> tuple[Tensor, bool]:
    x = ad.as_tensor(series, dtype=model.dtype)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    cfg = model.config
    if x.ndim != 3 or x.shape[1] != cfg.segment_len or x.shape[2] != cfg.input_dim:
        raise ShapeError(
            f"expected series of shape (L={cfg.segment_len}, D={cfg.input_dim}), got {tuple(series.shape)}")
    return x, single


def embed(series, model: ConvTransModel) -> Tensor:
    x, single = _as_batch(series, model)
    tokens = ad.conv1d(x, model.conv_kernels, model.conv_bias, stride=1, padding="same")
    if model.config.use_tape:
        tokens = add_ape(tokens, model.tape)
    return tokens.reshape(tokens.shape[1:]) if single else tokens


def layer_forward(tokens, layer: ConvTransLayer, rng=None) -> Tensor:
    x = ad.as_tensor(tokens)
    single = x.ndim == 2
    if single:
        x = x.reshape(1, *x.shape)
    y = layer(x, rng)
    return y.reshape(y.shape[1:]) if single else y


def head(tokens, model: ConvTransModel) -> Tensor:
    a = ad.elu(ad.as_tensor(tokens))
    pooled = ad.concat([ad.pool(a, "max_over_time"), ad.pool(a, "mean_over_time")], axis=-1)
    return model.classifier(pooled)


def forward(model: ConvTransModel, series, rng=None) -> Tensor:
    """Logits ``(M,)`` for one ``(L, D)`` window or ``(B, M)`` for a batch.

    Dropout is active only when ``rng`` is given.
    """
    x, single = _as_batch(series, model)
    tokens = embed(x, model)
    for layer in model.layers:
        tokens = layer(tokens, rng)
    logits = head(model.final_norm(tokens), model)
    return logits.reshape(logits.shape[1:]) if single else logits


def predict(model: ConvTransModel, windows: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(windows), batch_size):
        logits = forward(model, windows[start:start + batch_size])
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def save_model(path, model: ConvTransModel, extra: dict | None = None) -> None:
    config = {"model": model.config.to_dict(), "extra": extra or {}}
    write_container(path, MAGIC, config, model.state_arrays())


def load_model(path, dtype=np.float64) -> tuple[ConvTransModel, dict]:
    from .rng import Rng

    def shapes(config):
        cfg = ConvTransConfig.from_dict(config["model"])
        return [p.shape for p in ConvTransModel(cfg, Rng(0)).parameters()]

    config, arrays = read_container(path, MAGIC, shapes)
    model = ConvTransModel(ConvTransConfig.from_dict(config["model"]), Rng(0), dtype=dtype)
    model.load_arrays(arrays)
    return model, config.get("extra", {})
