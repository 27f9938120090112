"""Trip embeddings and the causal multi-head self-attention history encoder."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def positional_encode(pos, scale: Tensor, dim: int) -> Tensor:
    """Sinusoidal encoding of integer positions with a differentiable frequency scale.

    Entry ``2i`` is ``sin(pos / scale**(2i/dim))`` and entry ``2i+1`` the
    matching cosine, for ``i = 0 .. dim/2 - 1``.  Output shape is
    ``pos.shape + (dim,)``.
    """
    if dim % 2:
        raise ValueError(f"positional encoding dimension must be even, got {dim}")
    pos = np.asarray(pos, dtype=np.float64)
    if np.any(pos < 0):
        raise ValueError("positions must be non-negative")
    half = dim // 2
    exponents = 2.0 * np.arange(half) / dim
    # pos / scale**e == pos * exp(-e * log(scale))
    inv_freq = ad.exp(ad.log(ad.as_tensor(scale)) * (-exponents))
    angles = ad.reshape(ad.as_tensor(pos), pos.shape + (1,)) * inv_freq
    paired = ad.concatenate([ad.reshape(ad.sin(angles), pos.shape + (half, 1)),
                             ad.reshape(ad.cos(angles), pos.shape + (half, 1))], axis=-1)
    return ad.reshape(paired, pos.shape + (dim,))


def time_embedding(tau, hours, weekdays, hour_scale: Tensor, week_scale: Tensor,
                   hour_dim: int, week_dim: int) -> Tensor:
    """``concat(week encoding, hour encoding, tau)``; length ``week_dim + hour_dim + 1``."""
    tau = np.asarray(tau, dtype=np.float64)
    hours = np.asarray(hours)
    weekdays = np.asarray(weekdays)
    if np.any((hours < 0) | (hours > 23)) or np.any((weekdays < 0) | (weekdays > 6)):
        raise ValueError("hour must lie in 0..23 and weekday in 0..6")
    return ad.concatenate([positional_encode(weekdays, week_scale, week_dim),
                           positional_encode(hours, hour_scale, hour_dim),
                           ad.as_tensor(tau[..., None])], axis=-1)


def location_embedding(ids, weight: Tensor, bias: Tensor, features: np.ndarray | None = None) -> Tensor:
    """``W onehot(id) + b``, optionally followed by the station's feature column.

    ``weight`` is ``J x (S+1)`` with column ``S`` reserved for padding;
    ``features`` is ``P x S`` and padding positions receive zeros.
    """
    ids = np.asarray(ids, dtype=np.int64)
    n_ids = weight.shape[1]
    if np.any(ids < 0) or np.any(ids >= n_ids):
        raise IndexError(f"station id outside [0, {n_ids - 1}]")
    emb = ad.embedding(ad.transpose(weight), ids) + bias
    if features is None or features.shape[0] == 0:
        return emb
    padded = np.concatenate([features, np.zeros((features.shape[0], 1))], axis=1).T
    return ad.concatenate([emb, ad.as_tensor(padded[ids])], axis=-1)


def trip_embedding(time_emb: Tensor, origin_emb: Tensor, dest_emb: Tensor) -> Tensor:
    return ad.concatenate([time_emb, origin_emb, dest_emb], axis=-1)


def causal_mask(n: int) -> np.ndarray:
    """True strictly above the diagonal (future positions)."""
    return np.triu(np.ones((n, n), dtype=bool), k=1)


def causal_attention(E: Tensor, W_Q: Tensor, W_K: Tensor, W_V: Tensor, W_O: Tensor,
                     n_heads: int) -> Tensor:
    """Multi-head causally masked self-attention followed by GELU.

    ``E`` is ``(..., n, J)``; the per-head projections are stored side by side
    in ``W_Q``/``W_K`` (``J x L*c_k``) and ``W_V`` (``J x L*c_v``).  Returns
    ``(..., n, c_model)``.
    """
    lead = E.shape[:-2]
    n = E.shape[-2]
    c_k = W_Q.shape[1] // n_heads
    c_v = W_V.shape[1] // n_heads

    def heads(x: Tensor, c: int) -> Tensor:
        x = ad.reshape(x, lead + (n, n_heads, c))
        nd = len(lead)
        return ad.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))

    q = heads(E @ W_Q, c_k)
    k = heads(E @ W_K, c_k)
    v = heads(E @ W_V, c_v)
    nd = len(lead)
    k_t = ad.transpose(k, tuple(range(nd + 1)) + (nd + 2, nd + 1))
    scores = (q @ k_t) * (1.0 / math.sqrt(c_k))
    scores = ad.masked_fill(scores, causal_mask(n), -np.inf)
    att = ad.softmax(scores, axis=-1) @ v
    att = ad.transpose(att, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    att = ad.reshape(att, lead + (n, n_heads * c_v))
    return ad.gelu(att @ W_O)


def prepend_start_state(H: Tensor, h0: Tensor) -> Tensor:
    """``[h_0, h_1, ..., h_n]`` along the step axis."""
    lead = H.shape[:-2]
    start = ad.broadcast_to(ad.reshape(h0, (1,) * len(lead) + (1, h0.shape[-1])),
                            lead + (1, h0.shape[-1]))
    return ad.concatenate([start, H], axis=-2)
