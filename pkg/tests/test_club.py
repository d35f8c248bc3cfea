import math

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from dispa.club import (
    MiEstimate,
    RepresentationBatch,
    VariationalNetwork,
    estimate_mi,
    gaussian_club_oracle,
    gaussian_mi_oracle,
    log_likelihood,
    mi_tensor,
    nll_loss,
    numeric_mi_oracle,
    sample_correlated_gaussian,
    train_estimator,
)
from dispa.gradcheck import check_gradients
from dispa.nn import AdamState, ParameterSet
from dispa.tensor import Tensor

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def linear_head(dim, w_mu=1.0, b_mu=0.0, b_logvar=0.0):
    """Linear Gaussian head with mu = w_mu * x + b_mu and constant log-variance."""
    net = VariationalNetwork(dim, hidden=())
    net.params["mu.weight"].data[:] = w_mu * np.eye(dim)
    net.params["mu.bias"].data[:] = b_mu
    net.params["logvar.weight"].data[:] = 0.0
    net.params["logvar.bias"].data[:] = b_logvar
    return net


def test_loglik_at_mean():
    net = linear_head(1)
    val = log_likelihood(net, np.array([0.3]), np.array([0.3])).item()
    assert val == pytest.approx(-HALF_LOG_2PI, abs=1e-12)
    assert val == pytest.approx(-0.91894, abs=1e-5)


def test_loglik_one_sigma_away():
    net = linear_head(1, w_mu=0.0)
    val = log_likelihood(net, np.array([5.0]), np.array([1.0])).item()
    assert val == pytest.approx(-1.41894, abs=1e-5)


def test_loglik_factorises_over_dimensions():
    net = VariationalNetwork(2, hidden=(8,), seed=3)
    x, y = np.array([0.2, -0.4]), np.array([1.0, 0.5])
    mu, logvar = net.heads(Tensor(x))
    per_dim = [
        -0.5 * (logvar.data[d] + math.log(2 * math.pi))
        - (y[d] - mu.data[d]) ** 2 / (2 * math.exp(logvar.data[d]))
        for d in range(2)
    ]
    assert log_likelihood(net, x, y).item() == pytest.approx(sum(per_dim), abs=1e-12)


def test_nll_single_and_duplicate_pairs():
    net = linear_head(1)
    one = RepresentationBatch(np.array([[0.7]]), np.array([[0.7]]))
    two = RepresentationBatch(np.array([[0.7], [0.7]]), np.array([[0.7], [0.7]]))
    assert nll_loss(net, one).item() == pytest.approx(0.91894, abs=1e-5)
    assert nll_loss(net, two).item() == nll_loss(net, one).item()


def test_nll_matches_elementwise_recomputation():
    rng = np.random.default_rng(2)
    net = VariationalNetwork(3, hidden=(16, 16), seed=1)
    X, Y = rng.normal(size=(7, 3)), rng.normal(size=(7, 3))
    total = 0.0
    for x, y in zip(X, Y):
        mu, lv = (t.data for t in net.heads(Tensor(x)))
        total += sum(0.5 * (lv + math.log(2 * math.pi)) + (y - mu) ** 2 / (2 * np.exp(lv)))
    assert nll_loss(net, RepresentationBatch(X, Y)).item() == pytest.approx(total / 7, rel=1e-12)


def test_dimension_mismatch():
    net = VariationalNetwork(2, hidden=())
    with pytest.raises(ValueError):
        log_likelihood(net, np.zeros(2), np.zeros(3))
    with pytest.raises(ValueError):
        RepresentationBatch(np.zeros((3, 2)), np.zeros((3, 1)))
    with pytest.raises(ValueError):
        RepresentationBatch(np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        estimate_mi(VariationalNetwork(3, hidden=()), RepresentationBatch(np.zeros((2, 2)), np.zeros((2, 2))))


def test_logvar_is_clamped():
    net = linear_head(1, b_logvar=50.0)
    _, lv = net.heads(Tensor(np.zeros((1, 1))))
    assert lv.data[0, 0] == 8.0
    net = linear_head(1, b_logvar=-50.0)
    _, lv = net.heads(Tensor(np.zeros((1, 1))))
    assert lv.data[0, 0] == -8.0


def test_mi_single_pair_is_exactly_zero():
    net = VariationalNetwork(4, seed=5)
    rng = np.random.default_rng(0)
    b = RepresentationBatch(rng.normal(size=(1, 4)), rng.normal(size=(1, 4)))
    assert estimate_mi(net, b).value == 0.0


def test_mi_x_independent_head_is_exactly_zero():
    net = linear_head(3, w_mu=0.0, b_mu=0.37, b_logvar=-0.8)
    rng = np.random.default_rng(4)
    b = RepresentationBatch(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)) * 3)
    assert estimate_mi(net, b).value == 0.0


def test_mi_hand_example():
    net = linear_head(1)
    b = RepresentationBatch(np.array([[0.0], [1.0]]), np.array([[0.0], [1.0]]))
    est = estimate_mi(net, b)
    assert isinstance(est, MiEstimate) and est.n == 2
    assert est.value == pytest.approx(0.25, abs=1e-9)


def test_mi_permutation_invariant_exactly():
    rng = np.random.default_rng(8)
    net = VariationalNetwork(2, hidden=(32,), seed=2)
    X, Y = rng.normal(size=(20, 2)), rng.normal(size=(20, 2))
    perm = rng.permutation(20)
    a = estimate_mi(net, RepresentationBatch(X, Y)).value
    b = estimate_mi(net, RepresentationBatch(X[perm], Y[perm])).value
    assert a == b


def test_mi_invariant_to_constant_loglik_shift():
    # shifting log-variance bias by a constant changes every log-likelihood
    # by the same amount only when the residual term is unchanged: use y = mu
    rng = np.random.default_rng(1)
    X = rng.normal(size=(6, 1))
    net1, net2 = linear_head(1, b_logvar=0.0), linear_head(1, b_logvar=0.0)
    net2.params["mu.bias"].data[:] = 0.0
    b = RepresentationBatch(X, X.copy())
    assert estimate_mi(net1, b).value == estimate_mi(net2, b).value


def test_mi_gradient_wrt_inputs_matches_finite_differences():
    rng = np.random.default_rng(3)
    net = VariationalNetwork(2, hidden=(16,), seed=4, activation="gelu")
    ps = ParameterSet()
    ps.add("x", rng.normal(size=(5, 2)))
    ps.add("y", rng.normal(size=(5, 2)))
    res = check_gradients(lambda: mi_tensor(net, ps["x"], ps["y"]), ps, n_coords=20)
    assert res.ok(1e-4), res
    assert np.abs(ps["x"].grad).max() > 0 and np.abs(ps["y"].grad).max() > 0


def test_head_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    net = VariationalNetwork(3, hidden=(16, 16), seed=7)
    b = RepresentationBatch(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
    res = check_gradients(lambda: nll_loss(net, b), net.params, n_coords=100)
    assert res.ok(1e-4), res


def test_train_estimator_zero_lr_is_noop():
    net = VariationalNetwork(2, seed=0)
    before = net.params.checksum()
    b = RepresentationBatch(*sample_correlated_gaussian(32, 2, 0.5, np.random.default_rng(0)))
    traj = train_estimator(net, b, 3, AdamState(lr=0.0))
    assert net.params.checksum() == before
    assert len(traj) == 4 and len(set(traj)) == 1


def test_train_estimator_is_deterministic():
    b = RepresentationBatch(*sample_correlated_gaussian(32, 2, 0.5, np.random.default_rng(0)))
    sums = []
    for _ in range(2):
        net = VariationalNetwork(2, seed=11)
        train_estimator(net, b, 5, AdamState())
        sums.append(net.params.checksum())
    assert sums[0] == sums[1]


def test_train_estimator_rejects_zero_steps():
    net = VariationalNetwork(1)
    with pytest.raises(ValueError):
        train_estimator(net, RepresentationBatch(np.zeros((2, 1)), np.zeros((2, 1))), 0, AdamState())


def test_nll_approaches_noise_entropy():
    # y = x + eps, eps ~ N(0, 0.3^2): the conditional entropy is the NLL floor
    rng = np.random.default_rng(0)
    sigma = 0.3
    net = VariationalNetwork(1, hidden=(), seed=0)
    opt = AdamState(lr=0.05)
    for _ in range(400):
        x = rng.normal(size=(256, 1))
        train_estimator(net, RepresentationBatch(x, x + sigma * rng.normal(size=(256, 1))), 1, opt)
    x = rng.normal(size=(4096, 1))
    nll = nll_loss(net, RepresentationBatch(x, x + sigma * rng.normal(size=(4096, 1)))).item()
    floor = 0.5 * math.log(2 * math.pi * math.e * sigma**2)
    assert floor - 0.05 < nll < floor + 0.05


def test_gaussian_oracle_values():
    assert gaussian_mi_oracle(0.0) == 0.0
    assert gaussian_mi_oracle(0.8) == pytest.approx(0.51083, abs=5e-6)
    assert gaussian_mi_oracle(0.5) == pytest.approx(0.14384, abs=5e-6)
    assert gaussian_mi_oracle(0.5, d=4) == pytest.approx(4 * gaussian_mi_oracle(0.5))
    with pytest.raises(ValueError):
        gaussian_mi_oracle(1.0)


def test_club_oracle_dominates_true_mi():
    for rho in (0.1, 0.3, 0.8):
        assert gaussian_club_oracle(rho) >= gaussian_mi_oracle(rho)
    assert gaussian_club_oracle(0.8) == pytest.approx(0.64 / 0.36)


def test_estimate_with_exact_conditional_tracks_club_oracle():
    rho, d, n = 0.6, 2, 2000
    net = linear_head(d, w_mu=rho, b_logvar=math.log(1 - rho**2))
    rng = np.random.default_rng(0)
    vals = [estimate_mi(net, RepresentationBatch(*sample_correlated_gaussian(n, d, rho, rng))).value
            for _ in range(5)]
    assert np.mean(vals) == pytest.approx(gaussian_club_oracle(rho, d), rel=0.05)


def test_numeric_oracle_matches_closed_form():
    rho = 0.8
    cov = [[1, rho], [rho, 1]]
    val = numeric_mi_oracle(lambda X, Y: multivariate_normal(cov=cov).pdf(np.dstack([X, Y])),
                            (-5, 5), 400)
    assert val == pytest.approx(0.51083, abs=0.005)


def test_numeric_oracle_product_density_is_zero():
    g = lambda t: np.exp(-0.5 * t**2) / math.sqrt(2 * math.pi)  # noqa: E731
    val = numeric_mi_oracle(lambda X, Y: g(X) * g(Y), (-6, 6), 200)
    assert abs(val) < 1e-9


def test_numeric_oracle_ridge_grows_as_ridge_narrows():
    vals = []
    for width in (0.5, 0.2, 0.1, 0.05):
        cov = [[1, 1 - width**2], [1 - width**2, 1]]
        vals.append(numeric_mi_oracle(
            lambda X, Y: multivariate_normal(cov=cov).pdf(np.dstack([X, Y])), (-5, 5), 600))
    assert all(b > a for a, b in zip(vals, vals[1:]))


def test_numeric_oracle_rejects_coarse_grid():
    cov = [[1, 0.9], [0.9, 1]]
    with pytest.raises(ValueError):
        numeric_mi_oracle(lambda X, Y: multivariate_normal(cov=cov).pdf(np.dstack([X, Y])), (-1, 1), 50)


def test_sampler_correlation():
    x, y = sample_correlated_gaussian(20000, 3, 0.5, np.random.default_rng(0))
    assert x.shape == y.shape == (20000, 3)
    c = [np.corrcoef(x[:, k], y[:, k])[0, 1] for k in range(3)]
    assert np.allclose(c, 0.5, atol=0.02)
