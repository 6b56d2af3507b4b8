"""Spatial, channel, and parallel dual attention over a stacked feature map.

Row-vector convention throughout: features are rows of ``V`` (L x d_model) and
weights multiply on the right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pdcap import tensor as T
from pdcap.config import normalize_mode, uses_channel
from pdcap.errors import ConfigError, DimensionError
from pdcap.tensor import Tensor


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class SpatialAttentionParams:
    W_s: Tensor  # d_model x k
    b_s: Tensor  # k
    W_hs: Tensor  # hidden x k
    W_a: Tensor  # k x 1
    b_a: Tensor  # 1

    @classmethod
    def init(cls, rng, d_model, hidden, k):
        return cls(uniform_init(rng, d_model, (d_model, k)), zeros(k),
                   uniform_init(rng, hidden, (hidden, k)), uniform_init(rng, k, (k, 1)), zeros(1))

    def named(self):
        return [("W_s", self.W_s), ("b_s", self.b_s), ("W_hs", self.W_hs),
                ("W_a", self.W_a), ("b_a", self.b_a)]


@dataclass
class ChannelAttentionParams:
    W_c: Tensor  # d_model x k'
    b_c: Tensor  # k'
    W_hc: Tensor  # hidden x k'
    W_b: Tensor  # k' x d_model
    b_b: Tensor  # d_model

    @classmethod
    def init(cls, rng, d_model, hidden, k):
        return cls(uniform_init(rng, d_model, (d_model, k)), zeros(k),
                   uniform_init(rng, hidden, (hidden, k)), uniform_init(rng, k, (k, d_model)),
                   zeros(d_model))

    def named(self):
        return [("W_c", self.W_c), ("b_c", self.b_c), ("W_hc", self.W_hc),
                ("W_b", self.W_b), ("b_b", self.b_b)]


@dataclass
class AttentionOutput:
    context: Tensor
    spatial_weights: Tensor | None = None  # L x 1
    channel_weights: Tensor | None = None  # d_model


def _check(V, h, W_in, W_h):
    if V.values.ndim != 2 or h.values.ndim != 1:
        raise DimensionError(f"expected V as L x d and h as a vector, got {V.shape} and {h.shape}")
    if V.shape[1] != W_in.shape[0] or h.shape[0] != W_h.shape[0]:
        raise DimensionError(
            f"attention shapes disagree: V {V.shape}, h {h.shape}, "
            f"feature weights {W_in.shape}, hidden weights {W_h.shape}")


def spatial_attention(V, h, p: SpatialAttentionParams, literal_scaling=True, proj=None):
    """Softmax-weighted sum of the rows of V, conditioned on hidden state h.

    ``proj`` may carry a precomputed ``V W_s + b_s`` (it does not depend on h).
    With ``literal_scaling`` the weighted sum is further divided by L.
    """
    _check(V, h, p.W_s, p.W_hs)
    if proj is None:
        proj = T.broadcast_add_row(T.matmul(V, p.W_s), p.b_s)
    a = T.tanh(T.broadcast_add_row(proj, T.matmul(h, p.W_hs)))
    alpha = T.softmax_rows(T.broadcast_add_row(T.matmul(a, p.W_a), p.b_a))
    ctx = T.reshape(T.matmul(T.transpose(alpha), V), (V.shape[1],))
    if literal_scaling:
        ctx = T.scale(ctx, 1.0 / V.shape[0])
    return AttentionOutput(ctx, spatial_weights=alpha)


def channel_attention(V, h, p: ChannelAttentionParams, proj=None, v_mean=None):
    """Sigmoid channel gate applied to the row mean of V.

    The per-row score matrix is mean-pooled over rows before the gate
    projection so the gate is a single d_model vector.
    """
    _check(V, h, p.W_c, p.W_hc)
    if proj is None:
        proj = T.broadcast_add_row(T.matmul(V, p.W_c), p.b_c)
    if v_mean is None:
        v_mean = T.mean_rows(V)
    c = T.mean_rows(T.tanh(T.broadcast_add_row(proj, T.matmul(h, p.W_hc))))
    beta = T.sigmoid(T.add(T.matmul(c, p.W_b), p.b_b))
    return AttentionOutput(T.mul(beta, v_mean), channel_weights=beta)


def dual_context(V, h, sp, cp, mode="pd", literal_scaling=True, cache=None):
    """Context vector for the given attention mode.

    D modes sum independently computed spatial and channel contexts; P and
    plain modes use spatial attention alone. ``cache`` may hold the
    h-independent projections (``sp_proj``, ``cp_proj``, ``v_mean``).
    """
    mode = normalize_mode(mode)
    cache = cache or {}
    if sp is None:
        raise ConfigError(f"mode {mode!r} needs spatial attention parameters")
    spatial = spatial_attention(V, h, sp, literal_scaling, proj=cache.get("sp_proj"))
    if not uses_channel(mode):
        return spatial
    if cp is None:
        raise ConfigError(f"mode {mode!r} needs channel attention parameters")
    channel = channel_attention(V, h, cp, proj=cache.get("cp_proj"), v_mean=cache.get("v_mean"))
    return AttentionOutput(T.add(spatial.context, channel.context),
                           spatial_weights=spatial.spatial_weights,
                           channel_weights=channel.channel_weights)
