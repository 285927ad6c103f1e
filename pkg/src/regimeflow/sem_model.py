"""Per-regime neural SEM: masked temporal aggregation and log-likelihood.

One shared per-parent encoder embeds every (lag, variable) slot of the
history window together with a learned slot embedding; the sampled
adjacency masks and sums these features per target node; a shared
readout maps the aggregate (plus the node's own embedding) to the
predicted mean.  Residuals are scored by a parent-conditioned spline
flow (heteroscedastic mode) or a per-node composite affine-spline base
(homoscedastic non-Gaussian mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import flows, tensorcore as tc
from .errors import ConfigError

MODES = ("hetero", "nongauss")


@dataclass
class ModelConfig:
    d: int
    L: int
    mode: str = "hetero"
    hidden: int = 32
    embed_dim: int | None = None  # default: d, one embedding unit per node
    n_bins: int | None = None     # default: 128 hetero, 16 nongauss
    bound: float = flows.DEFAULT_TAIL_BOUND

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.embed_dim is None:
            self.embed_dim = self.d
        if self.n_bins is None:
            self.n_bins = 128 if self.mode == "hetero" else 16


@dataclass
class RegimeModelParams:
    """All learnable pieces of one regime's SEM."""

    config: ModelConfig
    embeddings: tc.Tensor        # ((L+1)*d, e) slot embeddings
    encoder: tc.MlpParams        # per-parent feature block
    readout: tc.MlpParams        # aggregate -> predicted mean
    flow: flows.ConditionalFlow | None = None
    base: flows.CompositeBase | None = None

    def parameters(self):
        out = [self.embeddings] + self.encoder.parameters() + self.readout.parameters()
        if self.flow is not None:
            out += self.flow.parameters()
        if self.base is not None:
            out += self.base.parameters()
        return out


def init_regime_model(config: ModelConfig, rng) -> RegimeModelParams:
    d, L, h, e = config.d, config.L, config.hidden, config.embed_dim
    embeddings = tc.parameter(rng.normal(0.0, 1.0, size=((L + 1) * d, e)))
    encoder = tc.init_mlp([1 + e, h, h], rng, residual=True, layer_norm=True)
    readout = tc.init_mlp([h + e, h, 1], rng, residual=True, layer_norm=True,
                          out_scale=0.1)
    flow = base = None
    if config.mode == "hetero":
        flow = flows.init_conditional_flow(d, L, e, h, config.n_bins, rng, config.bound)
    else:
        base = flows.init_composite_base(d, config.n_bins, bound=config.bound)
    return RegimeModelParams(config=config, embeddings=embeddings,
                             encoder=encoder, readout=readout, flow=flow, base=base)


# ---------------------------------------------------------------------------
# windows and slots


def build_windows(values: np.ndarray, ts: np.ndarray, L: int) -> np.ndarray:
    """(B, L+1, d) history windows; row r of window b is x[ts[b]-L+r]."""
    ts = np.asarray(ts, dtype=np.int64)
    if ts.size and (ts.min() < L or ts.max() >= values.shape[0]):
        raise ConfigError("window indices must lie in [L, T)")
    return values[ts[:, None] - L + np.arange(L + 1)[None, :], :]


def window_slots(windows: np.ndarray) -> np.ndarray:
    """Flatten windows to (B, (L+1)*d) with slot p = tau*d + j."""
    return windows[:, ::-1, :].reshape(windows.shape[0], -1)


def _self_loop_mask(d: int, L: int) -> np.ndarray:
    mask = np.ones(((L + 1) * d, d))
    mask[np.arange(d), np.arange(d)] = 0.0  # tau = 0 diagonal slots
    return mask


def aggregate(encoder: tc.MlpParams, embeddings: tc.Tensor, graph_flat,
              slots: np.ndarray) -> tc.Tensor:
    """Masked parent aggregation: (B, d, H) features per target node."""
    b, p = slots.shape
    h = encoder.out_width
    x_col = tc.Tensor(slots.reshape(b * p, 1))
    emb = tc.reshape(tc.broadcast_to(embeddings, (b,) + embeddings.shape), (b * p, -1))
    feats = tc.mlp_forward(encoder, tc.concat([x_col, emb], axis=-1))
    feats = tc.reshape(feats, (b, p, h))
    graph_flat = tc.as_tensor(graph_flat)
    d = graph_flat.shape[1]
    masked = tc.mul(graph_flat, _self_loop_mask(d, p // d - 1))
    return tc.swapaxes(tc.matmul(tc.swapaxes(feats, 1, 2), masked), 1, 2)


def _with_node_embedding(agg: tc.Tensor, embeddings: tc.Tensor) -> tc.Tensor:
    """Concat e_{0,i} onto each node's aggregate; flatten to (B*d, H+e)."""
    b, d, h = agg.shape
    e0 = tc.broadcast_to(embeddings[:d], (b, d, embeddings.shape[1]))
    return tc.reshape(tc.concat([agg, e0], axis=-1), (b * d, -1))


def mean_forward(params: RegimeModelParams, graph_flat, slots: np.ndarray) -> tc.Tensor:
    """Predicted means (B, d) under the given (relaxed or hard) graph."""
    agg = aggregate(params.encoder, params.embeddings, graph_flat, slots)
    inp = _with_node_embedding(agg, params.embeddings)
    return tc.reshape(tc.mlp_forward(params.readout, inp), (slots.shape[0], params.config.d))


def tgnn_mean(params: RegimeModelParams, graph_flat, x_window: np.ndarray,
              node: int) -> tc.Tensor:
    """Predicted mean of one node for a single (L+1, d) window."""
    d = params.config.d
    if not 0 <= node < d:
        raise ConfigError("node index out of range")
    slots = window_slots(np.asarray(x_window, dtype=np.float64)[None])
    return mean_forward(params, graph_flat, slots)[0, node]


def log_likelihood_rows(params: RegimeModelParams, graph_flat,
                        slots: np.ndarray, x_t: np.ndarray) -> tc.Tensor:
    """Per-sample conditional log-likelihood (B,) of observations x_t."""
    b, d = x_t.shape
    f = mean_forward(params, graph_flat, slots)
    resid = tc.reshape(tc.sub(tc.Tensor(x_t), f), (b * d,))
    if params.config.mode == "hetero":
        agg = aggregate(params.flow.encoder, params.flow.embeddings, graph_flat, slots)
        summary = _with_node_embedding(agg, params.flow.embeddings)
        lp = flows.conditional_log_density(params.flow, resid, summary)
    else:
        node_idx = np.tile(np.arange(d), b)
        lp = flows.base_log_density(params.base, resid, node_idx)
    return tc.tsum(tc.reshape(lp, (b, d)), axis=1)


def sample_log_likelihood(params: RegimeModelParams, graph_flat,
                          x_window: np.ndarray) -> tc.Tensor:
    """Scalar log p(x_t | window) for one (L+1, d) window (last row = x_t)."""
    window = np.asarray(x_window, dtype=np.float64)
    slots = window_slots(window[None])
    return log_likelihood_rows(params, graph_flat, slots, window[None, -1])[0]


def series_log_likelihood(params: RegimeModelParams, graph_flat,
                          values: np.ndarray, time_indices) -> tc.Tensor:
    """Sum of per-sample log-likelihoods over burn-in-free indices."""
    ts = np.asarray(time_indices, dtype=np.int64)
    L = params.config.L
    if ts.size == 0:
        return tc.Tensor(0.0)
    if ts.min() < L:
        raise ConfigError(f"likelihood indices must be >= {L} (burn-in excluded)")
    windows = build_windows(values, ts, L)
    return tc.tsum(log_likelihood_rows(params, graph_flat, window_slots(windows),
                                       values[ts]))


@dataclass
class Scaler:
    """Per-variable z-scoring fitted on the whole series."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        std = values.std(axis=0)
        return cls(mean=values.mean(axis=0), std=np.maximum(std, 1e-8))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def to_json_obj(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json_obj(cls, obj):
        return cls(mean=np.asarray(obj["mean"]), std=np.asarray(obj["std"]))
