"""Nonstationary-GP model tests: forward transforms, reduction, oracles."""

import math

import numpy as np
import pytest

from mbps.diffopt import OptimConfig
from mbps.kernels import FAMILIES, StationaryParams, mixture_cross
from mbps.models.base import Standardizer
from mbps.models.dgcn import (
    LENGTHSCALE_FLOOR,
    N_F,
    NOISE_HEAD_FLOOR,
    SIGNAL_FLOOR,
    _build_model,
    _init_weights,
    _weight_shapes,
    constant_output_model,
    dgcn_fit,
    dgcn_forward,
    dgcn_predict,
    dgcn_predict_core,
    head_size,
)
from mbps.models.gp import GpModel, gp_fit
from mbps.numerics import Gaussian, RngStream, sample_mvn

LN2 = math.log(2.0)


def zero_weight_model(n=8, d=2, dy=1, widths=(8,)):
    rng = RngStream(7)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, dy))
    weights = {
        name: np.zeros(shape)
        for name, shape in _weight_shapes(d, widths, dy * head_size(d))
    }
    return _build_model(
        weights, widths, 1.0, x, y, Standardizer.identity(d), Standardizer.identity(dy)
    )


def random_weight_model(seed=0, n=20, d=2, dy=1, widths=(8, 8), standardize=True):
    rng = RngStream(seed)
    x = rng.standard_normal((n, d))
    y = rng.standard_normal((n, dy))
    weights = _init_weights(d, widths, dy * head_size(d), rng.substream("w"))
    # nonzero biases so local parameters actually vary across inputs
    for name in list(weights):
        if name.startswith("b"):
            weights[name] = 0.3 * rng.substream(name).standard_normal(weights[name].shape)
    x_std = Standardizer.fit(x) if standardize else Standardizer.identity(d)
    y_std = Standardizer.fit(y) if standardize else Standardizer.identity(dy)
    return _build_model(weights, widths, 1.3, x, y, x_std, y_std)


def test_forward_zero_weights_gives_softplus_of_zero():
    model = zero_weight_model()
    lp = dgcn_forward(model, np.array([0.4, -1.2]))
    assert np.allclose(lp.lengthscales, LN2 + LENGTHSCALE_FLOOR, atol=1e-12)
    assert np.allclose(lp.mixture_weights, 1.0 / N_F, atol=1e-12)
    assert np.isclose(lp.signal_variance, LN2 + SIGNAL_FLOOR, atol=1e-12)
    assert np.isclose(lp.noise_variance, LN2 + NOISE_HEAD_FLOOR, atol=1e-12)


def test_forward_weights_normalized_and_positive():
    model = random_weight_model()
    rng = RngStream(3)
    for x in rng.standard_normal((20, 2)):
        lp = dgcn_forward(model, x)
        assert abs(np.sum(lp.mixture_weights) - 1.0) <= 1e-9
        assert np.all(lp.mixture_weights >= 0)
        assert np.all(lp.lengthscales > 0)
        assert lp.signal_variance > 0
        assert lp.noise_variance > 0


def test_forward_deterministic():
    model = random_weight_model()
    x = np.array([0.3, 0.9])
    a, b = dgcn_forward(model, x), dgcn_forward(model, x.copy())
    assert np.array_equal(a.lengthscales, b.lengthscales)
    assert np.array_equal(a.mixture_weights, b.mixture_weights)
    assert a.signal_variance == b.signal_variance


def test_forward_rejects_bad_input():
    from mbps.errors import InvalidInputError

    model = random_weight_model()
    with pytest.raises(InvalidInputError):
        dgcn_forward(model, np.array([np.nan, 0.0]))
    with pytest.raises(InvalidInputError):
        dgcn_forward(model, np.zeros(5))


@pytest.mark.parametrize("fam_idx", [0, 2, 4])
def test_stationary_reduction_matches_gp(fam_idx):
    rng = RngStream(11)
    x = rng.standard_normal((15, 2))
    y = rng.standard_normal((15, 2))
    ls, sv, noise, rq = 0.7, 2.0, 0.05, 1.3
    one_hot = np.zeros(N_F)
    one_hot[fam_idx] = 1.0
    nsm = constant_output_model(x, y, ls, one_hot, sv, noise, rq_alpha=rq)
    params = [StationaryParams(ls * np.ones(2), sv, noise, rq_alpha=rq)] * 2
    gp = GpModel.from_params(x, y, params, family=FAMILIES[fam_idx])
    q = rng.substream("q").standard_normal((50, 2))
    m1, v1 = nsm.predict_arrays(q)
    m2, v2 = gp.predict_arrays(q)
    assert np.max(np.abs(m1 - m2)) <= 1e-8
    assert np.max(np.abs(v1 - v2)) <= 1e-8


def test_interpolates_training_points_with_tiny_noise():
    rng = RngStream(5)
    x = np.linspace(-2, 2, 25)[:, None]
    y = np.sin(x)
    one_hot = np.zeros(N_F)
    one_hot[0] = 1.0
    model = constant_output_model(x, y, 0.8, one_hot, 1.0, 1e-9)
    mean, _ = model.predict_arrays(x)
    assert np.max(np.abs(mean - y)) <= 3.0 * math.sqrt(1e-8)


def test_matches_naive_inverse():
    model = random_weight_model(seed=4, n=18, d=2, dy=2)
    rng = RngStream(21)
    q = rng.standard_normal((10, 2))
    mean, var = model.predict_arrays(q)

    qs = model.x_std.transform(q)
    ys = model.y_std.transform(model.train_targets)
    ls, w, sv, _ = model.forward_fields(qs)
    from mbps.kernels import LocalParamsBatch

    for i in range(model.output_dim):
        train = model.local[i]
        kmat = mixture_cross(np, model.xs, train, model.xs, train, model.rq_alpha)
        kmat = kmat + np.diag(train.noise_variance)
        kinv = np.linalg.inv(kmat)
        qb = LocalParamsBatch(ls[i], w[i], sv[i], np.zeros(len(q)))
        kq = mixture_cross(np, qs, qb, model.xs, train, model.rq_alpha)
        m_ref = kq @ kinv @ ys[:, i]
        v_ref = sv[i] - np.sum((kq @ kinv) * kq, axis=1)
        m_ref = model.y_std.mean[i] + model.y_std.scale[i] * m_ref
        v_ref = float(model.y_std.scale[i] ** 2) * v_ref
        assert np.max(np.abs(mean[:, i] - m_ref)) <= 1e-6
        assert np.max(np.abs(var[:, i] - v_ref)) <= 1e-6


def test_variance_bounded_by_signal_variance():
    model = random_weight_model(seed=9, n=30, d=2, dy=1)
    rng = RngStream(14)
    q = 2.0 * rng.standard_normal((40, 2))
    _, var = model.predict_arrays(q)
    _, _, sv, _ = model.forward_fields(model.x_std.transform(q))
    bound = float(model.y_std.scale[0] ** 2) * (sv[0] + 1e-6)
    assert np.all(var > 0)
    assert np.all(var[:, 0] <= bound)


def test_core_matches_host_prediction():
    model = random_weight_model(seed=6, n=37, d=3, dy=2, widths=(8, 8))
    rng = RngStream(15)
    q = rng.standard_normal((9, 3))
    mean, var = model.predict_arrays(q)
    cache = model.rollout_cache()
    import jax.numpy as jnp

    m2, v2 = dgcn_predict_core(cache, jnp.asarray(q), (model.widths, 2, 3))
    assert np.max(np.abs(mean - np.asarray(m2))) <= 1e-8
    assert np.max(np.abs(var - np.asarray(v2))) <= 1e-8


def test_fit_constant_targets():
    rng = RngStream(31)
    x = rng.uniform(-1.0, 1.0, size=(40, 1))
    y = np.full((40, 1), 2.5)
    model = dgcn_fit(x, y, RngStream(0), cfg=OptimConfig(max_steps=60, learning_rate=5e-3))
    q = np.linspace(-1, 1, 30)[:, None]
    mean, _ = model.predict_arrays(q)
    assert np.max(np.abs(mean - 2.5)) <= 0.1


def test_fit_recovers_heteroscedastic_noise():
    rng = RngStream(42)
    n = 200
    x = np.sort(rng.uniform(-3.0, 3.0, size=n))[:, None]
    stds = np.where(x[:, 0] < 0, math.sqrt(0.01), math.sqrt(0.5))
    y = (stds * rng.substream("noise").standard_normal(n))[:, None]
    model = dgcn_fit(x, y, RngStream(1))
    _, _, _, noise = model.forward_fields(model.x_std.transform(x))
    left = float(np.mean(noise[0][x[:, 0] < 0]))
    right = float(np.mean(noise[0][x[:, 0] >= 0]))
    assert right >= 5.0 * left


def test_fit_held_out_likelihood_near_gp_on_stationary_data():
    rng = RngStream(77)
    x = np.sort(rng.uniform(-2.0, 2.0, size=80))[:, None]
    kern = np.exp(-0.5 * (x - x.T) ** 2 / 0.8**2)
    prior = Gaussian(np.zeros(80), kern + 1e-10 * np.eye(80))
    f = sample_mvn(prior, 1, rng.substream("f"))[0]
    y = (f + 0.05 * rng.substream("eps").standard_normal(80))[:, None]
    idx = rng.substream("split").generator.permutation(80)
    tr, te = idx[:60], idx[60:]

    def held_out_ll(mean, var, noise_var):
        v = var[:, 0] + noise_var
        r = y[te, 0] - mean[:, 0]
        return float(np.mean(-0.5 * (r**2 / v + np.log(2.0 * math.pi * v))))

    gp = gp_fit(x[tr], y[tr], RngStream(2))
    m, v = gp.predict_arrays(x[te])
    gp_ll = held_out_ll(m, v, gp.raw_params()[0].noise_variance)

    nsm = dgcn_fit(x[tr], y[tr], RngStream(3))
    m, v = nsm.predict_arrays(x[te])
    _, _, _, noise = nsm.forward_fields(nsm.x_std.transform(x[te]))
    noise_raw = float(np.mean(noise[0])) * float(nsm.y_std.scale[0] ** 2)
    nsm_ll = held_out_ll(m, v, noise_raw)

    assert abs(nsm_ll - gp_ll) <= 0.1 * max(abs(gp_ll), 1.0)


def test_fit_deterministic():
    rng = RngStream(55)
    x = rng.standard_normal((30, 2))
    y = rng.standard_normal((30, 1))
    cfg = OptimConfig(max_steps=40)
    a = dgcn_fit(x, y, RngStream(9), cfg=cfg)
    b = dgcn_fit(x, y, RngStream(9), cfg=cfg)
    q = rng.substream("q").standard_normal((5, 2))
    assert np.array_equal(a.predict_arrays(q)[0], b.predict_arrays(q)[0])


def test_fit_warm_start_runs():
    rng = RngStream(60)
    x = rng.standard_normal((25, 2))
    y = rng.standard_normal((25, 1))
    cfg = OptimConfig(max_steps=30)
    first = dgcn_fit(x, y, RngStream(4), cfg=cfg)
    second = dgcn_fit(x, y, RngStream(5), cfg=cfg, init_model=first)
    assert second.widths == first.widths
    assert np.all(np.isfinite(second.predict_arrays(x)[0]))


def test_predict_wraps_gaussians():
    model = random_weight_model(seed=2, n=12, d=2, dy=2)
    preds = dgcn_predict(model, np.zeros((3, 2)))
    assert len(preds) == 3
    assert preds[0].mean.shape == (2,)
    assert np.all(preds[0].variance > 0)
