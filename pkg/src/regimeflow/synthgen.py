"""Ground-truth multi-regime SEM construction and ancestral sampling.

Each regime owns a temporal causal graph (preferential-attachment
instantaneous slice, Erdos-Renyi lags), one-hidden-layer mean and scale
mechanisms (hidden width = d), and a noise family.  Sampling walks the
series in time, evaluating nodes in topological order of the active
regime's instantaneous graph; history always crosses regime boundaries.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError, ParseError
from .graphs import (TemporalCausalGraph, barabasi_albert_instantaneous,
                     erdos_renyi_lagged, topological_order)
from .seeding import named_stream

NOISE_FAMILIES = ("gaussian", "mlp-sin", "triangular")
DEFAULT_DURATIONS = (1000, 1500, 2000, 2500)
SIN_HIDDEN = 16
PILOT_DRAWS = 100_000
EXP_CLAMP = 5.0


@dataclass
class NoiseSpec:
    """Noise family; samples are standardized to zero mean, unit variance."""

    family: str = "gaussian"
    heteroscedastic: bool = False

    def __post_init__(self):
        if self.family not in NOISE_FAMILIES:
            raise ConfigError(f"unknown noise family {self.family!r}")


class NoiseSampler:
    """Realized per-regime sampler for one NoiseSpec."""

    def __init__(self, spec: NoiseSpec, rng):
        self.family = spec.family
        if spec.family == "mlp-sin":
            self.w1 = rng.normal(size=(1, SIN_HIDDEN))
            self.b1 = rng.normal(size=SIN_HIDDEN)
            self.w2 = rng.normal(size=SIN_HIDDEN)
            pilot = self._transform(rng.standard_normal(PILOT_DRAWS))
            self.mu = float(pilot.mean())
            self.sigma = float(pilot.std())
        else:
            self.mu, self.sigma = 0.0, 1.0

    def _transform(self, z: np.ndarray) -> np.ndarray:
        return np.sin(z[:, None] @ self.w1 + self.b1) @ self.w2

    def draw(self, rng, size=None):
        if self.family == "gaussian":
            return rng.standard_normal(size)
        if self.family == "triangular":
            a = np.sqrt(6.0)  # symmetric on [-sqrt(6), sqrt(6)]: unit variance
            return rng.triangular(-a, 0.0, a, size=size)
        z = rng.standard_normal(size)
        out = (self._transform(np.atleast_1d(z)) - self.mu) / self.sigma
        return float(out[0]) if size is None else out.reshape(np.shape(z))


@dataclass
class Mechanism:
    """One node's mean or log-scale function: masked one-hidden-layer MLP.

    Non-parent inputs are zeroed by `mask`; the nonlinearity is centered
    at zero so an empty parent set maps to exactly zero.
    """

    mask: np.ndarray          # ((L+1)*d,) 0/1
    w1: np.ndarray            # ((L+1)*d, hidden)
    b1: np.ndarray
    w2: np.ndarray            # (hidden,)
    activation: str = "tanh"  # tanh | exp
    linear: np.ndarray | None = None

    def __call__(self, flat: np.ndarray) -> float:
        x = flat * self.mask
        z = x @ self.w1 + self.b1
        if self.activation == "exp":
            h = np.exp(np.clip(z, -EXP_CLAMP, EXP_CLAMP)) - 1.0
        else:
            h = np.tanh(z)
        out = h @ self.w2
        if self.linear is not None:
            out = out + x @ self.linear
        return float(out)


@dataclass
class RegimeMechanisms:
    graph: TemporalCausalGraph
    means: list          # d Mechanisms
    log_scales: list     # d Mechanisms or empty (homoscedastic)
    noise: NoiseSampler
    topo: np.ndarray


@dataclass
class GroundTruthSEM:
    d: int
    L: int
    noise: NoiseSpec
    regimes: list

    @property
    def K(self) -> int:
        return len(self.regimes)

    @property
    def graphs(self) -> list:
        return [r.graph for r in self.regimes]


@dataclass
class RegimeLayout:
    """Ordered (regime_id, duration) blocks covering [1..T] exactly."""

    blocks: list
    min_duration: int = 0

    def __post_init__(self):
        for rid, dur in self.blocks:
            if dur < self.min_duration:
                raise ConfigError(
                    f"regime {rid} block of {dur} violates the {self.min_duration} floor")

    @property
    def total_length(self) -> int:
        return sum(dur for _, dur in self.blocks)

    def labels(self) -> np.ndarray:
        return np.concatenate([np.full(dur, rid, dtype=np.int64) for rid, dur in self.blocks])

    def to_json_obj(self):
        return {"blocks": [[int(r), int(n)] for r, n in self.blocks],
                "min_duration": self.min_duration}

    @classmethod
    def from_json_obj(cls, obj):
        return cls(blocks=[tuple(b) for b in obj["blocks"]],
                   min_duration=int(obj.get("min_duration", 0)))


def random_layout(K: int, rng, durations=DEFAULT_DURATIONS, recurring_blocks: int = 0,
                  min_duration: int | None = None) -> RegimeLayout:
    """One block per regime in order, plus optional recurring blocks."""
    durations = tuple(int(x) for x in durations)
    floor = min(durations) if min_duration is None else min_duration
    ids = list(range(K))
    for _ in range(recurring_blocks):
        nxt = int(rng.integers(0, K))
        if nxt == ids[-1]:  # adjacent blocks must switch regime
            nxt = (nxt + 1) % K
        ids.append(nxt)
    blocks = [(rid, int(rng.choice(durations))) for rid in ids]
    return RegimeLayout(blocks=blocks, min_duration=floor)


@dataclass
class GeneratorConfig:
    d: int = 5
    L: int = 1
    K: int = 2
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    ba_degree: int = 4
    er_mean_degree: float = 2.0

    def to_json_obj(self):
        return {"d": self.d, "L": self.L, "K": self.K,
                "noise": {"family": self.noise.family,
                          "heteroscedastic": self.noise.heteroscedastic},
                "ba_degree": self.ba_degree, "er_mean_degree": self.er_mean_degree}

    @classmethod
    def from_json_obj(cls, obj):
        return cls(d=obj["d"], L=obj["L"], K=obj["K"],
                   noise=NoiseSpec(**obj["noise"]),
                   ba_degree=obj["ba_degree"], er_mean_degree=obj["er_mean_degree"])


@dataclass
class MultiRegimeSeries:
    """T x d observations plus optional ground-truth labels and graphs."""

    values: np.ndarray
    labels: np.ndarray | None = None
    graphs: list | None = None
    layout: RegimeLayout | None = None
    config: GeneratorConfig | None = None
    seed: int | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ConfigError("series values must be a T x d matrix")

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @property
    def has_ground_truth(self) -> bool:
        return self.labels is not None and self.graphs is not None


def _init_mechanism(d: int, L: int, mask: np.ndarray, rng, activation="tanh",
                    out_scale=1.0, with_linear=False) -> Mechanism:
    p = (L + 1) * d
    k = max(int(mask.sum()), 1)
    w1 = rng.normal(0.0, 1.0, size=(p, d)) / np.sqrt(k)
    b1 = np.zeros(d)
    w2 = rng.uniform(0.5, 1.5, size=d) * rng.choice([-1.0, 1.0], size=d)
    w2 = w2 / np.sqrt(d) * out_scale
    linear = None
    if with_linear:
        sign = rng.choice([-1.0, 1.0], size=p)
        linear = rng.uniform(0.5, 1.5, size=p) * sign / np.sqrt(k)
    return Mechanism(mask=mask, w1=w1, b1=b1, w2=w2, activation=activation, linear=linear)


def _parent_mask(graph: TemporalCausalGraph, node: int) -> np.ndarray:
    """Flat mask over slots p = tau*d + j for parents of `node`."""
    return graph.adjacency[:, :, node].reshape(-1).astype(np.float64)


def build_sem(config: GeneratorConfig, rng) -> GroundTruthSEM:
    """Draw K regimes with independent graphs and mechanisms."""
    d, L, K = config.d, config.L, config.K
    if d < 2 or K < 1:
        raise ConfigError("need d >= 2 and K >= 1")
    hetero = config.noise.heteroscedastic
    nongauss_mix = not hetero and config.noise.family != "gaussian"
    regimes = []
    for _ in range(K):
        adjacency = np.concatenate([
            barabasi_albert_instantaneous(d, min(config.ba_degree, d - 1), rng)[None],
            erdos_renyi_lagged(d, L, config.er_mean_degree, rng),
        ])
        graph = TemporalCausalGraph(d=d, L=L, adjacency=adjacency)
        graph.validate_dag()
        means, log_scales = [], []
        for i in range(d):
            mask = _parent_mask(graph, i)
            if nongauss_mix:
                act = str(rng.choice(["tanh", "exp"]))
                means.append(_init_mechanism(d, L, mask, rng, activation=act,
                                             out_scale=0.5, with_linear=True))
            else:
                means.append(_init_mechanism(d, L, mask, rng, activation="tanh"))
            if hetero:
                log_scales.append(_init_mechanism(d, L, mask, rng, activation="tanh",
                                                  out_scale=0.8))
        noise = NoiseSampler(config.noise, rng)
        regimes.append(RegimeMechanisms(
            graph=graph, means=means, log_scales=log_scales, noise=noise,
            topo=topological_order(graph.instantaneous)))
    _assert_distinct(regimes)
    return GroundTruthSEM(d=d, L=L, noise=config.noise, regimes=regimes)


def _assert_distinct(regimes):
    for a in range(len(regimes)):
        for b in range(a + 1, len(regimes)):
            ra, rb = regimes[a], regimes[b]
            if ra.graph == rb.graph and all(
                    np.array_equal(ma.w1, mb.w1) for ma, mb in zip(ra.means, rb.means)):
                raise GenerationError(f"regimes {a} and {b} are identical")


def sample_series(sem: GroundTruthSEM, layout: RegimeLayout, rng,
                  seed: int | None = None,
                  config: GeneratorConfig | None = None) -> MultiRegimeSeries:
    """Ancestral sampling of one continuous series over the layout."""
    d, L = sem.d, sem.L
    for _, dur in layout.blocks:
        if dur < L + 1:
            raise ConfigError("every block must be at least L+1 samples long")
    labels = layout.labels()
    T = labels.size
    x = np.zeros((T, d))
    x[:L] = rng.standard_normal((L, d))  # pure-noise bootstrap, burn-in only
    hetero = sem.noise.heteroscedastic
    for t in range(L, T):
        reg = sem.regimes[labels[t]]
        flat = x[t - L:t + 1][::-1].reshape(-1)  # slot p = tau*d + j
        for i in reg.topo:
            eps = reg.noise.draw(rng, None)
            mean = reg.means[i](flat)
            scale = np.exp(reg.log_scales[i](flat)) if hetero else 1.0
            value = mean + scale * eps
            if not np.isfinite(value):
                raise GenerationError(f"non-finite sample at t={t}, node={i}")
            x[t, i] = value
            flat[i] = value  # instantaneous slot (tau=0) sees fresh values
    return MultiRegimeSeries(values=x, labels=labels, graphs=sem.graphs,
                             layout=layout, config=config, seed=seed)


# ---------------------------------------------------------------------------
# dataset I/O: CSV plus a .meta.json sidecar


def sidecar_path(csv_path: str) -> str:
    base = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return base + ".meta.json"


def export_dataset(series: MultiRegimeSeries, csv_path: str, force: bool = False):
    if not force and (os.path.exists(csv_path) or os.path.exists(sidecar_path(csv_path))):
        raise FileExistsError(f"{csv_path} exists; pass force=True to overwrite")
    d = series.d
    with open(csv_path, "w") as fh:
        fh.write("t," + ",".join(f"x{i + 1}" for i in range(d)) + "\n")
        for t in range(series.T):
            row = ",".join(f"{v:.17g}" for v in series.values[t])
            fh.write(f"{t + 1},{row}\n")
    meta = {
        "seed": series.seed,
        "layout": series.layout.to_json_obj() if series.layout else None,
        "labels": series.labels.tolist() if series.labels is not None else None,
        "graphs": [g.to_json_obj() for g in series.graphs] if series.graphs else None,
        "config": series.config.to_json_obj() if series.config else None,
    }
    with open(sidecar_path(csv_path), "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def import_dataset(csv_path: str) -> MultiRegimeSeries:
    """Read a dataset; a missing sidecar yields a fit-only series."""
    rows = []
    with open(csv_path) as fh:
        header = fh.readline().strip().split(",")
        if header[0] != "t" or len(header) < 2:
            raise ParseError(f"{csv_path}:1: expected header 't,x1,...'")
        width = len(header)
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise ParseError(f"{csv_path}:{lineno}: expected {width} columns, "
                                 f"got {len(parts)}")
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError as err:
                raise ParseError(f"{csv_path}:{lineno}: {err}") from None
    values = np.asarray(rows)
    meta_file = sidecar_path(csv_path)
    if not os.path.exists(meta_file):
        return MultiRegimeSeries(values=values)
    with open(meta_file) as fh:
        meta = json.load(fh)
    labels = np.asarray(meta["labels"], dtype=np.int64) if meta.get("labels") else None
    graphs = ([TemporalCausalGraph.from_json_obj(g) for g in meta["graphs"]]
              if meta.get("graphs") else None)
    layout = RegimeLayout.from_json_obj(meta["layout"]) if meta.get("layout") else None
    cfg = GeneratorConfig.from_json_obj(meta["config"]) if meta.get("config") else None
    return MultiRegimeSeries(values=values, labels=labels, graphs=graphs,
                             layout=layout, config=cfg, seed=meta.get("seed"))


def generate_dataset(config: GeneratorConfig, layout_durations, seed: int,
                     recurring_blocks: int = 0) -> MultiRegimeSeries:
    """Seeded end-to-end generation (SEM draw, layout draw, sampling)."""
    rng = named_stream(seed, "generator")
    sem = build_sem(config, rng)
    layout = random_layout(config.K, rng, durations=layout_durations,
                           recurring_blocks=recurring_blocks)
    return sample_series(sem, layout, rng, seed=seed, config=config)
