import numpy as np
import pytest

from regimeflow import synthgen
from regimeflow.errors import ConfigError, ParseError
from regimeflow.graphs import TemporalCausalGraph, is_dag


def empty_graph(d, L):
    return TemporalCausalGraph(d=d, L=L, adjacency=np.zeros((L + 1, d, d), dtype=np.int64))


def manual_sem(d, L, graphs, noise, rng, linear_only=False):
    """Hand-built SEM for controlled tests."""
    regimes = []
    hetero = noise.heteroscedastic
    for graph in graphs:
        means, log_scales = [], []
        for i in range(d):
            mask = synthgen._parent_mask(graph, i)
            mech = synthgen._init_mechanism(d, L, mask, rng)
            if linear_only:
                mech.w2[:] = 0.0
                mech.linear = mask * 0.8
            means.append(mech)
            if hetero:
                log_scales.append(synthgen._init_mechanism(d, L, mask, rng, out_scale=0.5))
        regimes.append(synthgen.RegimeMechanisms(
            graph=graph, means=means, log_scales=log_scales,
            noise=synthgen.NoiseSampler(noise, rng),
            topo=np.argsort(np.zeros(d), kind="stable")))
    return synthgen.GroundTruthSEM(d=d, L=L, noise=noise, regimes=regimes)


def test_noise_families_standardized():
    rng = np.random.default_rng(0)
    for family in synthgen.NOISE_FAMILIES:
        sampler = synthgen.NoiseSampler(synthgen.NoiseSpec(family=family), rng)
        draws = sampler.draw(np.random.default_rng(1), 100_000)
        assert abs(draws.mean()) < 0.05, family
        assert abs(draws.var() - 1.0) < 0.05, family


def test_build_sem_deterministic():
    cfg = synthgen.GeneratorConfig(d=5, K=2, noise=synthgen.NoiseSpec("gaussian", True))
    a = synthgen.build_sem(cfg, np.random.default_rng(3))
    b = synthgen.build_sem(cfg, np.random.default_rng(3))
    for ra, rb in zip(a.regimes, b.regimes):
        assert ra.graph == rb.graph
        assert all(np.array_equal(ma.w1, mb.w1) for ma, mb in zip(ra.means, rb.means))


def test_build_sem_single_regime():
    cfg = synthgen.GeneratorConfig(d=4, K=1)
    sem = synthgen.build_sem(cfg, np.random.default_rng(0))
    assert sem.K == 1
    assert is_dag(sem.regimes[0].graph.instantaneous)


def test_hetero_scale_positive_finite():
    cfg = synthgen.GeneratorConfig(d=4, K=1, noise=synthgen.NoiseSpec("gaussian", True))
    sem = synthgen.build_sem(cfg, np.random.default_rng(7))
    rng = np.random.default_rng(8)
    reg = sem.regimes[0]
    for _ in range(100):
        flat = rng.normal(size=(100, 2 * 4)) * 3
        for row in flat:
            for ls in reg.log_scales:
                s = np.exp(ls(row))
                assert np.isfinite(s) and s > 0


def test_empty_graph_gaussian_gives_iid_standard_normal():
    rng = np.random.default_rng(1)
    sem = manual_sem(3, 1, [empty_graph(3, 1)], synthgen.NoiseSpec("gaussian"), rng)
    layout = synthgen.RegimeLayout(blocks=[(0, 10_000)])
    series = synthgen.sample_series(sem, layout, np.random.default_rng(2))
    x = series.values[1:]
    n = x.size
    assert np.abs(x.mean(axis=0)).max() < 5.0 / np.sqrt(len(x))
    assert np.abs(x.var(axis=0) - 1.0).max() < 5.0 * np.sqrt(2.0 / len(x))
    assert n == 9999 * 3


def test_single_lagged_edge_recovers_sign():
    g = empty_graph(2, 1)
    adj = g.adjacency.copy()
    adj[1, 0, 1] = 1  # x1_{t-1} -> x2_t
    g = TemporalCausalGraph(2, 1, adj)
    rng = np.random.default_rng(3)
    sem = manual_sem(2, 1, [g], synthgen.NoiseSpec("gaussian"), rng, linear_only=True)
    series = synthgen.sample_series(sem, synthgen.RegimeLayout(blocks=[(0, 5000)]),
                                    np.random.default_rng(4))
    x = series.values
    # linear coefficient is +0.8 on the lag-1 slot: regression must be positive
    coef = np.polyfit(x[:-1, 0], x[1:, 1], 1)[0]
    assert coef > 0.5


def test_same_seed_bit_identical():
    cfg = synthgen.GeneratorConfig(d=4, K=2, noise=synthgen.NoiseSpec("mlp-sin", True))
    a = synthgen.generate_dataset(cfg, (200, 300), seed=11)
    b = synthgen.generate_dataset(cfg, (200, 300), seed=11)
    assert np.array_equal(a.values, b.values)
    assert np.array_equal(a.labels, b.labels)


def test_homoscedastic_equals_hetero_with_zero_scale():
    rng = np.random.default_rng(5)
    g = empty_graph(3, 1)
    homo = manual_sem(3, 1, [g], synthgen.NoiseSpec("gaussian", False), rng)
    hetero = manual_sem(3, 1, [g], synthgen.NoiseSpec("gaussian", True),
                        np.random.default_rng(5))
    for reg in hetero.regimes:  # force g == 0
        for ls in reg.log_scales:
            ls.w1[:] = 0.0
            ls.w2[:] = 0.0
    layout = synthgen.RegimeLayout(blocks=[(0, 500)])
    a = synthgen.sample_series(homo, layout, np.random.default_rng(6))
    b = synthgen.sample_series(hetero, layout, np.random.default_rng(6))
    assert np.array_equal(a.values, b.values)


def test_layout_respects_floor_and_coverage():
    layout = synthgen.random_layout(3, np.random.default_rng(0))
    assert layout.total_length == layout.labels().size
    assert all(dur >= layout.min_duration for _, dur in layout.blocks)
    with pytest.raises(ConfigError):
        synthgen.RegimeLayout(blocks=[(0, 10)], min_duration=100)


def test_layout_recurrence_switches_adjacent_blocks():
    layout = synthgen.random_layout(2, np.random.default_rng(1), recurring_blocks=3)
    ids = [rid for rid, _ in layout.blocks]
    assert len(ids) == 5
    assert all(a != b for a, b in zip(ids, ids[1:]))
    assert set(ids) == {0, 1}


def test_generated_sampling_terminates_and_labels_align():
    cfg = synthgen.GeneratorConfig(d=5, K=2, noise=synthgen.NoiseSpec("triangular"))
    series = synthgen.generate_dataset(cfg, (300, 400), seed=0)
    assert series.T == series.labels.size
    assert sorted(set(series.labels.tolist())) == [0, 1]
    assert np.isfinite(series.values).all()


def test_export_import_roundtrip(tmp_path):
    cfg = synthgen.GeneratorConfig(d=3, K=2, noise=synthgen.NoiseSpec("gaussian", True))
    series = synthgen.generate_dataset(cfg, (150, 200), seed=9)
    path = str(tmp_path / "data.csv")
    synthgen.export_dataset(series, path)
    back = synthgen.import_dataset(path)
    assert np.array_equal(back.values, series.values)
    assert np.array_equal(back.labels, series.labels)
    assert all(a == b for a, b in zip(back.graphs, series.graphs))
    assert back.seed == 9


def test_export_refuses_overwrite(tmp_path):
    cfg = synthgen.GeneratorConfig(d=2, K=1)
    series = synthgen.generate_dataset(cfg, (50,), seed=1)
    path = str(tmp_path / "data.csv")
    synthgen.export_dataset(series, path)
    with pytest.raises(FileExistsError):
        synthgen.export_dataset(series, path)
    synthgen.export_dataset(series, path, force=True)


def test_import_missing_column_is_parse_error(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,x1,x2\n1,0.5,0.25\n2,0.5\n")
    with pytest.raises(ParseError) as err:
        synthgen.import_dataset(str(path))
    assert ":3:" in str(err.value)


def test_import_without_sidecar_is_fit_only(tmp_path):
    path = tmp_path / "plain.csv"
    path.write_text("t,x1,x2\n1,0.5,0.25\n2,-1,2\n")
    series = synthgen.import_dataset(str(path))
    assert series.values.shape == (2, 2)
    assert not series.has_ground_truth
