import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ckrdduq.flows import (CouplingLayer, FlowConfigError, FlowModel, FlowSpec, FlowTrainConfig,
                           FlowTrainingError, NonlinearCDF, block_partition, nll, train_flow)
from ckrdduq.nn import Graph, load_into, read_checkpoint, save_checkpoint

LOG_2PI = math.log(2 * math.pi)


def perturb(model, scale, seed):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.value += scale * rng.normal(size=p.shape)
    return model


def random_model(dim, cond_dim=0, stages=2, seed=0, scale=0.3, layers=2):
    m = FlowModel(FlowSpec(dim=dim, cond_dim=cond_dim, stages=stages, layers_per_stage=layers, width=8, bins=8, seed=seed))
    return perturb(m, scale, seed + 1)


def jacobian(model, a, c=None, step=1e-6):
    d = a.size
    J = np.empty((d, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = step
        zp, _ = model.forward_logdet(a + e, c)
        zm, _ = model.forward_logdet(a - e, c)
        J[:, k] = (zp[0] - zm[0]) / (2 * step)
    return J


# -- coupling layer -------------------------------------------------------------


def test_coupling_identity_at_init(rng):
    layer = CouplingLayer((1, 3), [(0, 1)], 2, 0.6, 8, rng, "c")
    g = Graph()
    x = rng.normal(size=(5, 3))
    y, ld = layer.forward(g, g.input(x), g.input(rng.normal(size=(5, 2))))
    assert np.array_equal(y.value, x) and np.all(ld.value == 0)


def _scalar_layer():
    layer = CouplingLayer((1, 2), [(0, 1)], 0, 0.5, 4, np.random.default_rng(0), "c")
    last = layer.net.layers[-1]
    last.weight.value[...] = 0.0
    last.bias.value[...] = [1.0, 0.0]  # s head, t head
    return layer


def test_coupling_scalar_example():
    layer = _scalar_layer()
    g = Graph()
    y, ld = layer.forward(g, g.input(np.array([[0.3, 2.0]])), None)
    assert y.value[0, 1] == pytest.approx(2.761594, abs=1e-6)
    assert y.value[0, 0] == 0.3
    assert ld.value[0] == pytest.approx(0.322661, abs=1e-6)
    assert layer.inverse(y.value, None)[0, 1] == pytest.approx(2.0, abs=1e-12)


def test_coupling_rejects_bad_gamma(rng):
    for gamma in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(FlowConfigError):
            CouplingLayer((1, 2), [(0, 1)], 0, gamma, 4, rng, "c")
    with pytest.raises(FlowConfigError):
        FlowModel(FlowSpec(dim=2, gamma=1.0))


def test_coupling_round_trip_many_draws(rng):
    layer = CouplingLayer((2, 4), [(0, 2)], 3, 0.6, 8, rng, "c")
    for p in layer.parameters():
        p.value += rng.normal(size=p.shape)
    x, c = rng.normal(size=(1000, 4)), rng.normal(size=(1000, 3))
    g = Graph(record=False)
    y, _ = layer.forward(g, g.input(x), g.input(c))
    assert np.max(np.abs(layer.inverse(y.value, c) - x)) < 1e-10


@given(st.integers(0, 10_000), st.floats(0.05, 0.95))
def test_coupling_scale_in_band(seed, gamma):
    rng = np.random.default_rng(seed)
    layer = CouplingLayer((1, 3), [(0, 1)], 1, gamma, 8, rng, "c")
    for p in layer.parameters():
        p.value += 0.3 * rng.normal(size=p.shape)
    x, c = 2 * rng.normal(size=(50, 3)), rng.normal(size=(50, 1))
    s = layer.scale_factors(x, c)
    assert np.all(s > 1 - gamma) and np.all(s < 1 + gamma)
    # far out tanh rounds to +-1, so only the closed band survives in floating point
    for p in layer.parameters():
        p.value *= 20
    s = layer.scale_factors(x, c)
    assert np.all(s >= 1 - gamma) and np.all(s <= 1 + gamma) and np.all(s > 0)


def test_nonlinear_cdf_identity_at_init(rng):
    layer = NonlinearCDF((0, 2), 16, "n")
    g = Graph()
    x = 3 * rng.normal(size=(20, 2))
    y, ld = layer.forward(g, g.input(x), None)
    assert np.allclose(y.value, x, atol=1e-12) and np.allclose(ld.value, 0, atol=1e-12)


# -- model ------------------------------------------------------------------------


def test_block_partition():
    assert block_partition(16, 2) == [(0, 8), (8, 16)]
    for d in range(1, 12):
        for r in range(1, d + 1):
            blocks = block_partition(d, r)
            assert blocks[0][0] == 0 and blocks[-1][1] == d
            assert all(b0 < b1 for b0, b1 in blocks)
            assert all(blocks[k][1] == blocks[k + 1][0] for k in range(len(blocks) - 1))


def test_identity_model_log_density_at_zero():
    for d in (1, 3, 6):
        m = FlowModel(FlowSpec(dim=d, stages=min(2, d), seed=1))
        assert m.log_prob(np.zeros((1, d)))[0] == pytest.approx(-0.5 * d * LOG_2PI, abs=1e-12)


def test_identity_model_forward_is_standardization(rng):
    m = FlowModel(FlowSpec(dim=3, stages=2))
    a = rng.normal(2.0, 3.0, size=(500, 3))
    m.fit_standardization(a)
    z, ld = m.forward_logdet(a[:5])
    assert np.allclose(z, (a[:5] - m.alpha_shift) / m.alpha_scale, atol=1e-12)
    assert np.allclose(ld, -np.log(m.alpha_scale).sum(), atol=1e-12)


@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 1000))
def test_flow_round_trip(dim, cond_dim, seed):
    m = random_model(dim, cond_dim, stages=min(dim, 3), seed=seed, scale=0.5)
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(40, dim))
    c = rng.normal(size=(40, cond_dim)) if cond_dim else None
    z, _ = m.forward_logdet(a, c)
    assert np.max(np.abs(m.inverse(z, c) - a)) < 1e-8


@pytest.mark.parametrize("dim,cond_dim,stages", [(2, 0, 2), (3, 2, 2), (4, 0, 3), (4, 3, 4)])
def test_logdet_matches_fd_jacobian(dim, cond_dim, stages):
    m = random_model(dim, cond_dim, stages, seed=dim + 10 * cond_dim)
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.normal(size=(1, dim))
        c = rng.normal(size=(1, cond_dim)) if cond_dim else None
        _, ld = m.forward_logdet(a, c)
        J = jacobian(m, a[0], c)
        assert abs(ld[0] - np.linalg.slogdet(J)[1]) < 1e-5


@pytest.mark.parametrize("dim,stages", [(4, 2), (4, 4), (5, 3)])
def test_jacobian_is_block_lower_triangular(dim, stages):
    m = random_model(dim, 2, stages, seed=3)
    rng = np.random.default_rng(2)
    for _ in range(5):
        J = jacobian(m, rng.normal(size=dim), rng.normal(size=(1, 2)))
        for b0, b1 in m.blocks:
            assert np.max(np.abs(J[b0:b1, b1:]), initial=0.0) < 1e-8


def test_quadrature_normalization_2d():
    m = random_model(2, 0, 2, seed=11, scale=0.1)
    x = np.linspace(-8, 8, 401)
    X, Y = np.meshgrid(x, x, indexing="ij")
    p = np.exp(m.log_prob(np.column_stack([X.ravel(), Y.ravel()])))
    mass = p.sum() * (x[1] - x[0]) ** 2
    assert 0.98 <= mass <= 1.02


def test_unconditional_ignores_conditioner(rng):
    m = random_model(3, 0, 2, seed=4)
    a = rng.normal(size=(10, 3))
    assert np.array_equal(m.log_prob(a), m.log_prob(a, None))
    g = Graph(record=False)
    z1, _ = m.forward(g, a, rng.normal(size=(10, 5)))
    assert np.array_equal(z1.value, m.forward_logdet(a)[0])


def test_identity_model_samples(rng):
    m = FlowModel(FlowSpec(dim=2))
    m.fit_standardization(rng.normal([1.0, -3.0], [2.0, 0.5], size=(1000, 2)))
    s = m.sample(None, 10_000, seed=0)
    assert np.all(np.abs(s.mean(axis=0) - m.alpha_shift) < 4 * m.alpha_scale / 100)
    assert np.all(np.isfinite(m.log_prob(s)))


def test_sample_is_seeded():
    m = random_model(3, 1, 2, seed=8)
    assert np.array_equal(m.sample(np.ones(1), 5, seed=3), m.sample(np.ones(1), 5, seed=3))


def test_checkpoint_round_trip(tmp_path, rng):
    m = random_model(3, 2, 2, seed=6)
    m.fit_standardization(rng.normal(size=(100, 3)), rng.normal(size=(100, 2)))
    path = tmp_path / "flow.ckrw"
    save_checkpoint(path, m.parameters(), m.manifest())
    _, _, meta = read_checkpoint(path)
    m2 = FlowModel.from_manifest(meta)
    load_into(path, m2.parameters())
    a, c = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
    assert np.array_equal(m.log_prob(a, c), m2.log_prob(a, c))
    assert meta["partition"] == [b - a for a, b in m.blocks] and meta["conditional"]


# -- training ------------------------------------------------------------------------


def gaussian_pairs(n, seed):
    """alpha | c ~ N(A c + b, L L^T) with c ~ N(0, 1)."""
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(n, 1))
    A = np.array([[1.0], [-0.5]])
    L = np.array([[0.6, 0.0], [0.3, 0.4]])
    alpha = c @ A.T + np.array([0.5, -1.0]) + rng.normal(size=(n, 2)) @ L.T
    logp = -0.5 * np.sum(np.linalg.solve(L, (alpha - c @ A.T - [0.5, -1.0]).T) ** 2, axis=0) \
        - np.log(np.diag(L)).sum() - LOG_2PI
    return alpha, c, logp


def test_zero_epochs_leaves_model_unchanged(rng):
    m = random_model(2, 1, 2, seed=2)
    before = [p.value.copy() for p in m.parameters()]
    alpha, c, _ = gaussian_pairs(300, 0)
    train_flow(m, alpha, c, FlowTrainConfig(epochs=0))
    assert all(np.array_equal(a, p.value) for a, p in zip(before, m.parameters()))


def test_too_few_pairs_rejected():
    m = FlowModel(FlowSpec(dim=2, cond_dim=1))
    alpha, c, _ = gaussian_pairs(100, 0)
    with pytest.raises(FlowConfigError):
        train_flow(m, alpha, c, FlowTrainConfig(batch_size=256))


def test_nan_loss_reports_epoch_and_batch():
    m = FlowModel(FlowSpec(dim=2, cond_dim=1))
    alpha, c, _ = gaussian_pairs(300, 0)
    m.fit_standardization(alpha, c)
    alpha[5, 0] = np.nan
    with pytest.raises(FlowTrainingError, match="epoch 1, batch"):
        train_flow(m, alpha, c, FlowTrainConfig(batch_size=64, epochs=1, holdout=0.0))


def test_conditional_gaussian_likelihood():
    alpha, c, _ = gaussian_pairs(6000, 1)
    m = FlowModel(FlowSpec(dim=2, cond_dim=1, stages=2, layers_per_stage=4, seed=0))
    train_flow(m, alpha, c, FlowTrainConfig(batch_size=128, epochs=25, seed=0))
    a_te, c_te, lp_te = gaussian_pairs(20000, 2)
    assert abs(np.mean(m.log_prob(a_te, c_te)) - np.mean(lp_te)) < 0.1


def test_heldout_loss_decreases_first_epochs():
    curves = []
    for seed in range(5):
        alpha, c, _ = gaussian_pairs(2000, 10 + seed)
        m = FlowModel(FlowSpec(dim=2, cond_dim=1, stages=2, layers_per_stage=2, seed=seed))
        r = train_flow(m, alpha, c, FlowTrainConfig(batch_size=128, epochs=10, lr=1e-3, seed=seed))
        curves.append([e["heldout_loss"] for e in r.history])
    mean = np.mean(curves, axis=0)
    assert np.all(np.diff(mean) < 0)


def test_training_lowers_loss_and_matches_mixture_moment():
    rng = np.random.default_rng(4)
    comp = rng.random(4000) < 0.4
    data = np.where(comp[:, None], rng.normal([-2.0, 1.0], 0.5, size=(4000, 2)),
                    rng.normal([1.5, -0.5], 0.7, size=(4000, 2)))
    m = FlowModel(FlowSpec(dim=2, stages=2, layers_per_stage=4, seed=1))
    m.fit_standardization(data)
    before = nll(m, data)
    train_flow(m, data, None, FlowTrainConfig(batch_size=128, epochs=20, seed=1))
    assert nll(m, data) <= before
    s = m.sample(None, 10_000, seed=5)
    se = np.sqrt(data.var(axis=0) / data.shape[0] + s.var(axis=0) / s.shape[0])
    assert np.all(np.abs(s.mean(axis=0) - data.mean(axis=0)) < 3 * se)
