import numpy as np
import pytest

from regimeflow import flows, sem_model as sm, tensorcore as tc
from regimeflow.errors import ConfigError


def small_model(d=3, L=1, mode="hetero", hidden=6, n_bins=5, seed=0):
    cfg = sm.ModelConfig(d=d, L=L, mode=mode, hidden=hidden, n_bins=n_bins)
    return sm.init_regime_model(cfg, np.random.default_rng(seed))


def hard_graph(d, L, entries=()):
    g = np.zeros((L + 1, d, d))
    for tau, j, i in entries:
        g[tau, j, i] = 1.0
    return g.reshape((L + 1) * d, d)


def test_zero_graph_mean_ignores_window():
    model = small_model()
    g = hard_graph(3, 1)
    rng = np.random.default_rng(1)
    out = [sm.mean_forward(model, g, sm.window_slots(rng.normal(size=(4, 2, 3)))).data
           for _ in range(2)]
    assert np.array_equal(out[0], out[1])


def test_masking_blocks_non_parent_gradient():
    model = small_model()
    # only edge: x^0 at lag 1 -> node 2
    g = hard_graph(3, 1, [(1, 0, 2)])
    rng = np.random.default_rng(2)
    window = rng.normal(size=(2, 3))
    base = sm.tgnn_mean(model, g, window, node=2).data
    # perturbing the parent slot moves the mean; any other slot must not
    for row in range(2):
        for j in range(3):
            bumped = window.copy()
            bumped[row, j] += 0.37
            out = sm.tgnn_mean(model, g, bumped, node=2).data
            if (row, j) == (0, 0):  # lag-1 slot of variable 0
                assert abs(out - base) > 1e-8
            else:
                assert out == base


def test_self_loop_slot_is_masked_even_if_graph_says_otherwise():
    model = small_model()
    g = hard_graph(3, 1, [(0, 1, 1)])  # illegal self loop: must be ignored
    rng = np.random.default_rng(3)
    w1 = rng.normal(size=(2, 3))
    w2 = w1.copy()
    w2[1, 1] += 1.0
    assert sm.tgnn_mean(model, g, w1, 1).data == sm.tgnn_mean(model, g, w2, 1).data


def test_aggregation_linear_in_graph_weights():
    model = small_model()
    slots = sm.window_slots(np.random.default_rng(4).normal(size=(5, 2, 3)))
    g_full = hard_graph(3, 1, [(1, 0, 2)])
    g_half = 0.5 * g_full
    full = sm.aggregate(model.encoder, model.embeddings, g_full, slots).data
    half = sm.aggregate(model.encoder, model.embeddings, g_half, slots).data
    assert np.allclose(full, 2.0 * half, atol=1e-14)


def _freeze_to_standard_normal(model):
    """Zero the mean head and force the identity spline."""
    for w in model.readout.weights:
        w.data[:] = 0.0
    if model.readout.res_proj is not None:
        model.readout.res_proj.data[:] = 0.0
    for b in model.readout.biases:
        b.data[:] = 0.0
    target = model.flow.readout if model.flow is not None else None
    if target is not None:
        for w in target.weights:
            w.data[:] = 0.0
        if target.res_proj is not None:
            target.res_proj.data[:] = 0.0
        n_bins = model.flow.n_bins
        target.biases[-1].data[:] = 0.0
        target.biases[-1].data[2 * n_bins:] = flows.IDENTITY_RAW_DERIV


def test_zero_graph_identity_flow_is_iid_standard_normal():
    for mode in ("hetero", "nongauss"):
        model = small_model(mode=mode, seed=5)
        _freeze_to_standard_normal(model)
        g = hard_graph(3, 1)
        rng = np.random.default_rng(6)
        values = rng.normal(size=(10, 3))
        ts = np.arange(1, 10)
        ll = sm.series_log_likelihood(model, g, values, ts).data
        expected = flows.log_normal(values[ts]).sum()
        assert abs(ll - expected) < 1e-10, mode


def test_likelihood_invariant_to_non_parent_values():
    model = small_model(seed=7)
    g = hard_graph(3, 1, [(1, 0, 2), (0, 0, 1)])
    rng = np.random.default_rng(8)
    window = rng.normal(size=(2, 3))
    base = sm.sample_log_likelihood(model, g, window).data
    bumped = window.copy()
    bumped[0, 2] += 5.0  # lag slot of variable 2: parent of nothing
    assert sm.sample_log_likelihood(model, g, bumped).data == base


def test_series_loglik_empty_and_additive():
    model = small_model(seed=9)
    g = hard_graph(3, 1, [(1, 1, 0)])
    values = np.random.default_rng(10).normal(size=(30, 3))
    assert sm.series_log_likelihood(model, g, values, []).data == 0.0
    a = sm.series_log_likelihood(model, g, values, np.arange(1, 12))
    b = sm.series_log_likelihood(model, g, values, np.arange(12, 30))
    whole = sm.series_log_likelihood(model, g, values, np.arange(1, 30))
    assert abs(whole.data - (a.data + b.data)) < 1e-9


def test_series_loglik_matches_per_sample_sum():
    model = small_model(seed=11)
    g = hard_graph(3, 1, [(0, 0, 2), (1, 2, 1)])
    values = np.random.default_rng(12).normal(size=(12, 3))
    ts = np.arange(1, 12)
    total = sm.series_log_likelihood(model, g, values, ts).data
    naive = sum(sm.sample_log_likelihood(model, g, values[t - 1:t + 1]).data
                for t in ts)
    assert abs(total - naive) < 1e-9


def test_series_loglik_rejects_burn_in_indices():
    model = small_model()
    g = hard_graph(3, 1)
    values = np.zeros((10, 3))
    with pytest.raises(ConfigError):
        sm.series_log_likelihood(model, g, values, [0, 5])


@pytest.mark.parametrize("mode", ["hetero", "nongauss"])
def test_full_gradient_matches_finite_differences(mode):
    model = small_model(d=3, L=1, mode=mode, hidden=4, n_bins=4, seed=13)
    g = hard_graph(3, 1, [(0, 0, 1), (1, 2, 2), (1, 1, 0)])
    values = np.random.default_rng(14).normal(size=(6, 3))
    ts = np.arange(1, 6)

    def fn():
        return sm.series_log_likelihood(model, g, values, ts)

    report = tc.grad_check(fn, model.parameters(), step=1e-5, tolerance=1e-4)
    assert report.ok, f"worst relative error {report.worst}"


def test_scaler_roundtrip():
    rng = np.random.default_rng(15)
    values = rng.normal(3.0, 2.5, size=(100, 4))
    scaler = sm.Scaler.fit(values)
    z = scaler.transform(values)
    assert np.allclose(z.mean(axis=0), 0.0, atol=1e-12)
    assert np.allclose(z.std(axis=0), 1.0, atol=1e-12)
    assert np.allclose(scaler.inverse(z), values)
    back = sm.Scaler.from_json_obj(scaler.to_json_obj())
    assert np.allclose(back.mean, scaler.mean)
