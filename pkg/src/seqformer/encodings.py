"""Time-aware absolute position encoding (tAPE) and relative attention (eRPE).

tAPE is the usual sine/cosine table with every frequency rescaled by
``d_model / L``, so the encoding keeps its resolution when the series is
short relative to the embedding width.

eRPE adds one learnable scalar per relative offset to the post-softmax
attention weights. Each head owns a vector of ``2L - 1`` scalars; the pair
``(i, j)`` (1-based) reads entry ``i - j + L``. The combined weights are not
renormalized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Module


def base_frequencies(d_model: int) -> np.ndarray:
    """``10000 ** (-2k / d_model)`` for ``k = 0 .. d_model/2 - 1``."""
    k = np.arange(d_model // 2, dtype=np.float64)
    return np.power(10000.0, -2.0 * k / d_model)


def tape_frequencies(L: int, d_model: int) -> np.ndarray:
    return base_frequencies(d_model) * d_model / L


def _sinusoid(n_positions: int, freqs: np.ndarray) -> np.ndarray:
    angles = np.arange(n_positions, dtype=np.float64)[:, None] * freqs[None, :]
    table = np.empty((n_positions, 2 * freqs.size))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


def _check_dims(L: int, d_model: int) -> None:
    if L < 1:
        raise ValueError(f"sequence length must be >= 1, got {L}")
    if d_model < 2 or d_model % 2:
        raise ValueError(f"d_model must be a positive even integer, got {d_model}")


def sinusoidal_table(L: int, d_model: int) -> np.ndarray:
    """Vanilla transformer table (no length rescaling), positions from 0."""
    _check_dims(L, d_model)
    return _sinusoid(L, base_frequencies(d_model))


@dataclass(frozen=True)
class TapeTable:
    L: int
    d_model: int
    table: np.ndarray

    @property
    def frequencies(self) -> np.ndarray:
        return tape_frequencies(self.L, self.d_model)


def build_tape_table(L: int, d_model: int) -> TapeTable:
    _check_dims(L, d_model)
    return TapeTable(L, d_model, _sinusoid(L, tape_frequencies(L, d_model)))


def add_ape(x, table: TapeTable | np.ndarray) -> Tensor:
    x = ad.as_tensor(x)
    values = table.table if isinstance(table, TapeTable) else np.asarray(table)
    if x.shape[-2:] != values.shape:
        raise ShapeError(f"position table {values.shape} does not match input {x.shape}")
    return x + values.astype(x.dtype)


def erpe_index(i: int, j: int, L: int) -> int:
    """1-based slot of the relative weight for query ``i`` and key ``j``."""
    if not (1 <= i <= L and 1 <= j <= L):
        raise IndexError(f"positions ({i}, {j}) outside 1..{L}")
    return i - j + L


def erpe_index_map(L: int) -> np.ndarray:
    """``L x L`` matrix of 1-based slots, entry ``[i-1, j-1] = i - j + L``."""
    pos = np.arange(1, L + 1)
    return pos[:, None] - pos[None, :] + L


class ERPEWeights(Module):
    """Per-head relative weights, shape ``(heads, 2L - 1)``, zero-initialized."""

    def __init__(self, heads: int, L: int, dtype=np.float64):
        self.heads = heads
        self.L = L
        self.w = ad.parameter(np.zeros((heads, 2 * L - 1)), dtype=dtype)

    def head(self, h: int) -> Tensor:
        return self.w[h]


def _relative_bias(w: Tensor, L: int) -> Tensor:
    if w.shape[-1] != 2 * L - 1:
        raise ShapeError(f"relative weight length {w.shape[-1]} != 2L-1 = {2 * L - 1}")
    return ad.gather(w, erpe_index_map(L) - 1, axis=-1)


def erpe_attention(q, k, v, w=None, scale: float | None = None, return_weights: bool = False):
    """Scaled dot-product attention with an optional post-softmax relative bias.

    ``q``, ``k``, ``v`` are ``(..., L, d_head)``. ``w`` is ``(2L-1,)`` or
    ``(heads, 2L-1)`` and broadcasts against the ``(..., heads, L, L)``
    weight matrix. Returns the ``(..., L, d_head)`` outputs, plus the
    combined weight matrix when ``return_weights`` is set.
    """
    q, k, v = ad.as_tensor(q), ad.as_tensor(k), ad.as_tensor(v)
    L = q.shape[-2]
    if L < 1 or k.shape[-2] != L or v.shape[-2] != L:
        raise ShapeError(f"q/k/v lengths disagree: {q.shape}, {k.shape}, {v.shape}")
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
    weights = ad.softmax(scores, axis=-1)
    if w is not None:
        weights = weights + _relative_bias(ad.as_tensor(w), L)
    out = ad.matmul(weights, v)
    return (out, weights) if return_weights else out
