"""Variational distribution over temporal causal graphs.

Lagged edges are independent Bernoullis parametrized by logit pairs
(u, q); each unordered instantaneous pair carries a 3-way categorical
(i->j, j->i, no edge) over lower-triangular logit matrices, which rules
out self loops and 2-cycles by construction.  Longer instantaneous
cycles are suppressed by the acyclicity term of the graph prior; only
the final thresholded graph is required to be a DAG.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .errors import NumericError
from .graphs import SERIES_CAP, SERIES_TOL

LOGIT_CLAMP = 15.0
DEFAULT_TEMPERATURE = 0.25
SPARSE_INIT_OFFSET = 1.0  # no-edge logits start ahead: edge prob < 0.5


@dataclass
class PriorConfig:
    """Weights of the unnormalized graph prior."""

    sparsity: float = 50.0  # lambda_s
    rho: float = 1.0        # quadratic acyclicity weight
    alpha: float = 0.0      # linear acyclicity weight

    def __post_init__(self):
        if self.sparsity < 0 or self.rho < 0:
            raise ValueError("sparsity and rho must be non-negative")


@dataclass
class GraphPosteriorParams:
    """Per-regime variational logits."""

    d: int
    L: int
    lag_u: tc.Tensor      # (L, d, d)
    lag_q: tc.Tensor      # (L, d, d)
    inst_u: tc.Tensor     # (d, d), strictly lower triangle used
    inst_q: tc.Tensor
    inst_e: tc.Tensor

    def parameters(self):
        return [self.lag_u, self.lag_q, self.inst_u, self.inst_q, self.inst_e]

    def pair_indices(self):
        return np.tril_indices(self.d, k=-1)


@dataclass
class SampledGraph:
    """One Monte Carlo graph: hard {0,1} forward, relaxed backward."""

    adjacency: tc.Tensor  # (L+1, d, d) straight-through tensor
    hard: np.ndarray

    @property
    def flat(self) -> tc.Tensor:
        """((L+1)*d, d) view: row tau*d+j, column i holds G_tau[j, i]."""
        shape = self.adjacency.shape
        return tc.reshape(self.adjacency, (shape[0] * shape[1], shape[2]))


def init_graph_posterior(d: int, L: int, rng) -> GraphPosteriorParams:
    noise = lambda shape: rng.normal(0.0, 0.1, size=shape)
    return GraphPosteriorParams(
        d=d, L=L,
        lag_u=tc.parameter(noise((L, d, d))),
        lag_q=tc.parameter(noise((L, d, d)) + SPARSE_INIT_OFFSET),
        inst_u=tc.parameter(noise((d, d))),
        inst_q=tc.parameter(noise((d, d))),
        inst_e=tc.parameter(noise((d, d)) + SPARSE_INIT_OFFSET),
    )


def _clamp(a: np.ndarray) -> np.ndarray:
    return np.clip(a, -LOGIT_CLAMP, LOGIT_CLAMP)


def edge_probabilities(phi: GraphPosteriorParams) -> np.ndarray:
    """(L+1, d, d) marginal edge probabilities."""
    d, L = phi.d, phi.L
    probs = np.zeros((L + 1, d, d))
    u, q = _clamp(phi.lag_u.data), _clamp(phi.lag_q.data)
    probs[1:] = 1.0 / (1.0 + np.exp(q - u))
    il, jl = phi.pair_indices()
    logits = np.stack([_clamp(phi.inst_u.data[il, jl]),
                       _clamp(phi.inst_q.data[il, jl]),
                       _clamp(phi.inst_e.data[il, jl])], axis=-1)
    ex = np.exp(logits - logits.max(-1, keepdims=True))
    cat = ex / ex.sum(-1, keepdims=True)
    probs[0][il, jl] = cat[:, 0]
    probs[0][jl, il] = cat[:, 1]
    return probs


def threshold_graph(phi: GraphPosteriorParams, threshold: float = 0.5) -> np.ndarray:
    """Hard adjacency keeping entries with marginal probability > threshold."""
    return (edge_probabilities(phi) > threshold).astype(np.float64)


def _gumbel(rng, shape) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_sample(phi: GraphPosteriorParams, temperature: float, rng) -> SampledGraph:
    """Straight-through sample: hard argmax forward, tempered softmax backward."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    d, L = phi.d, phi.L
    lag_noise = _gumbel(rng, (L, d, d, 2))
    il, jl = phi.pair_indices()
    pair_noise = _gumbel(rng, (il.size, 3))

    lag_logits = tc.concat([
        tc.reshape(tc.add(tc.clip(phi.lag_u, -LOGIT_CLAMP, LOGIT_CLAMP), lag_noise[..., 0]),
                   (L, d, d, 1)),
        tc.reshape(tc.add(tc.clip(phi.lag_q, -LOGIT_CLAMP, LOGIT_CLAMP), lag_noise[..., 1]),
                   (L, d, d, 1)),
    ], axis=-1)
    lag_soft = tc.softmax(tc.mul(lag_logits, 1.0 / temperature), axis=-1)[
        ..., 0]
    lag_hard = (lag_logits.data[..., 0] > lag_logits.data[..., 1]).astype(np.float64)

    key = (il, jl)
    pair_logits = tc.concat([
        tc.reshape(tc.add(tc.clip(phi.inst_u, -LOGIT_CLAMP, LOGIT_CLAMP)[key], pair_noise[:, 0]), (il.size, 1)),
        tc.reshape(tc.add(tc.clip(phi.inst_q, -LOGIT_CLAMP, LOGIT_CLAMP)[key], pair_noise[:, 1]), (il.size, 1)),
        tc.reshape(tc.add(tc.clip(phi.inst_e, -LOGIT_CLAMP, LOGIT_CLAMP)[key], pair_noise[:, 2]), (il.size, 1)),
    ], axis=-1)
    pair_soft = tc.softmax(tc.mul(pair_logits, 1.0 / temperature), axis=-1)
    winner = pair_logits.data.argmax(axis=-1)

    # fixed 0/1 placement maps scatter pair categories into the d*d slice
    place_ij = np.zeros((d * d, il.size))
    place_ji = np.zeros((d * d, il.size))
    place_ij[il * d + jl, np.arange(il.size)] = 1.0
    place_ji[jl * d + il, np.arange(il.size)] = 1.0
    g0_soft = tc.reshape(
        tc.add(tc.matmul(tc.Tensor(place_ij), tc.reshape(pair_soft[:, 0], (il.size, 1))),
               tc.matmul(tc.Tensor(place_ji), tc.reshape(pair_soft[:, 1], (il.size, 1)))),
        (1, d, d))
    soft = tc.concat([g0_soft, lag_soft], axis=0)

    hard = np.zeros((L + 1, d, d))
    hard[1:] = lag_hard
    hard[0][il, jl] = (winner == 0).astype(np.float64)
    hard[0][jl, il] = (winner == 1).astype(np.float64)
    return SampledGraph(adjacency=tc.straight_through(hard, soft), hard=hard)


def acyclicity_penalty_op(g0: tc.Tensor) -> tc.Tensor:
    """Differentiable trace(exp(W o W)) - d by the truncated power series."""
    d = g0.shape[0]
    m = tc.mul(g0, g0)
    diag = (np.arange(d), np.arange(d))
    term = tc.Tensor(np.eye(d))
    h = tc.Tensor(0.0)
    for k in range(1, SERIES_CAP + 1):
        term = tc.mul(tc.matmul(term, m), 1.0 / k)
        h = tc.add(h, tc.tsum(term[diag]))
        if np.abs(term.data).max() < SERIES_TOL:
            return h
    raise NumericError("acyclicity series did not converge within the term cap")


def log_prior(sampled: SampledGraph, prior: PriorConfig) -> tc.Tensor:
    """Unnormalized log p(G): sparsity plus augmented acyclicity penalties."""
    adj = sampled.adjacency
    fro = tc.tsum(tc.mul(adj, adj))
    h = acyclicity_penalty_op(adj[0])
    return tc.neg(tc.add(tc.add(tc.mul(fro, prior.sparsity),
                                tc.mul(tc.mul(h, h), prior.rho)),
                         tc.mul(h, prior.alpha)))


def entropy(phi: GraphPosteriorParams) -> tc.Tensor:
    """H(q): Bernoulli entropies of lags plus categorical pair entropies."""
    d, L = phi.d, phi.L
    n_lag = L * d * d
    lag_logits = tc.concat([
        tc.reshape(tc.clip(phi.lag_u, -LOGIT_CLAMP, LOGIT_CLAMP), (n_lag, 1)),
        tc.reshape(tc.clip(phi.lag_q, -LOGIT_CLAMP, LOGIT_CLAMP), (n_lag, 1)),
    ], axis=-1)
    il, jl = phi.pair_indices()
    key = (il, jl)
    pair_logits = tc.concat([
        tc.reshape(tc.clip(phi.inst_u, -LOGIT_CLAMP, LOGIT_CLAMP)[key], (il.size, 1)),
        tc.reshape(tc.clip(phi.inst_q, -LOGIT_CLAMP, LOGIT_CLAMP)[key], (il.size, 1)),
        tc.reshape(tc.clip(phi.inst_e, -LOGIT_CLAMP, LOGIT_CLAMP)[key], (il.size, 1)),
    ], axis=-1)
    total = tc.Tensor(0.0)
    for logits in (lag_logits, pair_logits):
        logp = tc.sub(logits, tc.logsumexp(logits, axis=-1, keepdims=True))
        p = tc.softmax(logits, axis=-1)
        total = tc.add(total, tc.neg(tc.tsum(tc.mul(p, logp))))
    return total
