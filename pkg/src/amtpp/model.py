"""The full next-trip model: encoder, time head, origin head and OD block."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import TrainConfig
from .data import PaddedBatch, UserSequence, pad_batch
from .encoder import (causal_attention, location_embedding, prepend_start_state, time_embedding,
                      trip_embedding)
from .od_head import build_context, build_od_matrix, destination_log_probs, od_mask, origin_distribution
from .time_head import MixtureOutputs, lognormal_mdn_params, mdn_params


# The raw gap feature (hours) makes hidden states large at initialisation;
# shrinking the mixture heads keeps exp() outputs near 1 on the first step.
MDN_GAIN = 0.1
PEAK_INIT_HOURS = (1.5, 72.0)


def xavier(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class HeadOutputs:
    mixture: MixtureOutputs
    context: Tensor
    origin_probs: Tensor
    origin_log_probs: Tensor
    dest_log_probs: Tensor
    log_od: Tensor | None

    @property
    def dest_probs(self) -> np.ndarray:
        return np.exp(self.dest_log_probs.data)

    @property
    def od(self) -> np.ndarray | None:
        return None if self.log_od is None else np.exp(self.log_od.data)


@dataclass
class StepLikelihoods:
    """Per-step log-likelihood terms (``B x T``) and their loss masks."""

    time: Tensor
    origin: Tensor
    dest: Tensor
    time_mask: np.ndarray
    marker_mask: np.ndarray
    heads: HeadOutputs


class AMTPP:
    """Parameters plus the forward computation.

    ``params`` maps names to leaf tensors; everything else (station features,
    OD mask) is constant.
    """

    def __init__(self, config: TrainConfig, params: dict[str, Tensor] | None = None,
                 features: np.ndarray | None = None, forbidden_pairs=()):
        self.config = config
        S = config.num_stations
        if features is not None and features.shape != (config.n_features, S):
            raise ValueError(f"station features must be {config.n_features} x {S}, got {features.shape}")
        self.features = features
        self.forbidden_pairs = [tuple(map(int, p)) for p in forbidden_pairs]
        self.mask = od_mask(S, self.forbidden_pairs)
        self.params = params if params is not None else init_params(config, np.random.default_rng(config.seed))

    # -- dimensions --------------------------------------------------------
    @property
    def embed_dim(self) -> int:
        return embed_dim(self.config)

    @property
    def context_dim(self) -> int:
        c = self.config
        return c.c_model + (3 if c.lognorm_time_head else 4) * c.K

    @property
    def frozen(self) -> list[str]:
        if self.config.fixed_embedding:
            return ["log_scale_hour", "log_scale_week"]
        return []

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # -- forward -----------------------------------------------------------
    def embed(self, batch: PaddedBatch) -> Tensor:
        c, p = self.config, self.params
        if c.no_time_embedding:
            emb_t = ad.as_tensor(batch.tau[..., None])
        else:
            emb_t = time_embedding(batch.tau, batch.hours, batch.weekdays,
                                   ad.exp(p["log_scale_hour"]), ad.exp(p["log_scale_week"]), c.J_h, c.J_w)
        emb_o = location_embedding(batch.origins, p["W_em_o"], p["b_em_o"], self.features)
        emb_d = location_embedding(batch.destinations, p["W_em_d"], p["b_em_d"], self.features)
        return trip_embedding(emb_t, emb_o, emb_d)

    def encode_embeddings(self, E: Tensor) -> Tensor:
        """Hidden states ``[h_0, ..., h_n]`` from trip embeddings ``(..., n, J)``."""
        H = E
        for layer in range(self.config.n_layers):
            p = self.params
            H = causal_attention(H, p[f"attn{layer}.W_Q"], p[f"attn{layer}.W_K"], p[f"attn{layer}.W_V"],
                                 p[f"attn{layer}.W_O"], self.config.n_heads)
        return prepend_start_state(H, self.params["h0"])

    def encode(self, batch: PaddedBatch) -> Tensor:
        return self.encode_embeddings(self.embed(batch))

    def heads(self, h: Tensor, beta_scale: float = 1.0) -> HeadOutputs:
        c, p = self.config, self.params
        if c.lognorm_time_head:
            mixture = lognormal_mdn_params(h, p)
        else:
            mixture = mdn_params(h, p, c.beta_unconstrained)
        if beta_scale != 1.0:
            mixture = mixture.scaled_peak(beta_scale)
        ctx = build_context(h, mixture)
        o_probs, o_log = origin_distribution(ctx, p["phi_o"], p["b_o"])
        if c.no_od_matrix:
            logits = ctx @ p["phi_d"] + p["b_d"]
            return HeadOutputs(mixture, ctx, o_probs, o_log, ad.log_softmax(logits), None)
        log_od = build_od_matrix(ctx, p["phi_m1"], p["phi_m2"], self.mask, c.rank, log_space=True)
        return HeadOutputs(mixture, ctx, o_probs, o_log, destination_log_probs(log_od, o_log), log_od)

    def step_log_likelihoods(self, batch: PaddedBatch) -> StepLikelihoods:
        """Log-likelihood of every trip given the trips before it."""
        states = self.encode(batch)
        h_prev = states[:, :-1, :]
        out = self.heads(h_prev)
        tau = np.where(batch.time_mask > 0, batch.tau, 1.0)
        ll_t = out.mixture.log_likelihood(tau)
        S = self.config.num_stations
        o_idx = np.where(batch.marker_mask > 0, batch.origins, 0)
        d_idx = np.where(batch.marker_mask > 0, batch.destinations, 0)
        if np.any(o_idx >= S) or np.any(d_idx >= S):
            raise ValueError("station id outside the model's station range")
        ll_o = ad.reshape(ad.gather(out.origin_log_probs, o_idx[..., None], axis=-1), o_idx.shape)
        ll_d = ad.reshape(ad.gather(out.dest_log_probs, d_idx[..., None], axis=-1), d_idx.shape)
        return StepLikelihoods(ll_t, ll_o, ll_d, batch.time_mask, batch.marker_mask, out)

    def next_trip(self, sequences: list[UserSequence], beta_scale: float = 1.0) -> HeadOutputs:
        """Predictive heads for the trip following each sequence (empty sequences allowed)."""
        S = self.config.num_stations
        c_model = self.config.c_model
        nonempty = [s for s in sequences if len(s)]
        hs = np.zeros((len(sequences), c_model))
        if nonempty:
            batch = pad_batch(nonempty, S, self.config.max_len)
            states = self.encode(batch).data
            rows = iter(range(len(nonempty)))
            for i, s in enumerate(sequences):
                if len(s):
                    r = next(rows)
                    hs[i] = states[r, batch.lengths[r]]
        for i, s in enumerate(sequences):
            if not len(s):
                hs[i] = self.params["h0"].data
        return self.heads(ad.as_tensor(hs), beta_scale)


def embed_dim(c: TrainConfig) -> int:
    time_dim = 1 if c.no_time_embedding else c.J_w + c.J_h + 1
    return time_dim + c.J_o + c.J_d + 2 * c.n_features


def init_params(c: TrainConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Xavier-uniform weights, zero biases, zero start state, scales at ``init_pos_scale``.

    Mixture heads are the exception: their weights are shrunk by ``MDN_GAIN``
    and the peak biases are spread over ``PEAK_INIT_HOURS``.
    """
    S, K = c.num_stations, c.K
    J = embed_dim(c)
    ctx = c.c_model + (3 if c.lognorm_time_head else 4) * K
    arrays: dict[str, np.ndarray] = {}
    arrays["log_scale_hour"] = np.array(math.log(c.init_pos_scale))
    arrays["log_scale_week"] = np.array(math.log(c.init_pos_scale))
    for side, dim in (("o", c.J_o), ("d", c.J_d)):
        w = xavier(rng, S + 1, dim, (dim, S + 1))
        w[:, S] = 0.0
        arrays[f"W_em_{side}"] = w
        arrays[f"b_em_{side}"] = np.zeros(dim)
    d_in = J
    for layer in range(c.n_layers):
        hk, hv = c.n_heads * c.c_k, c.n_heads * c.c_v
        arrays[f"attn{layer}.W_Q"] = xavier(rng, d_in, c.c_k, (d_in, hk))
        arrays[f"attn{layer}.W_K"] = xavier(rng, d_in, c.c_k, (d_in, hk))
        arrays[f"attn{layer}.W_V"] = xavier(rng, d_in, c.c_v, (d_in, hv))
        arrays[f"attn{layer}.W_O"] = xavier(rng, hv, c.c_model, (hv, c.c_model))
        d_in = c.c_model
    arrays["h0"] = np.zeros(c.c_model)
    head_names = ("w", "mu", "sigma") if c.lognorm_time_head else ("w", "beta", "lambda", "gamma")
    for name in head_names:
        arrays[f"phi_{name}"] = MDN_GAIN * xavier(rng, c.c_model, K, (c.c_model, K))
        arrays[f"b_{name}"] = np.zeros(K)
    # component peaks start log-spaced over plausible activity durations
    peaks = np.log(np.geomspace(*PEAK_INIT_HOURS, K)) if K > 1 else np.log([np.sqrt(np.prod(PEAK_INIT_HOURS))])
    if c.lognorm_time_head:
        arrays["b_mu"] = peaks
    else:
        arrays["b_beta"] = peaks if c.beta_unconstrained else np.log(peaks)
    arrays["phi_o"] = xavier(rng, ctx, S, (ctx, S))
    arrays["b_o"] = np.zeros(S)
    if c.no_od_matrix:
        arrays["phi_d"] = xavier(rng, ctx, S, (ctx, S))
        arrays["b_d"] = np.zeros(S)
    else:
        arrays["phi_m1"] = xavier(rng, ctx, S * c.rank, (ctx, S * c.rank))
        arrays["phi_m2"] = xavier(rng, ctx, S * c.rank, (ctx, S * c.rank))
    return {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}


def count_parameters(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
