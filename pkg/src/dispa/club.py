"""Variational contrastive log-ratio upper bound (vCLUB) of mutual information.

A small network maps ``x`` to the mean and log-variance of a diagonal Gaussian
``q(y | x)``. It is fitted by maximum likelihood on paired samples; the MI
estimate contrasts the log-likelihood of matched pairs against all pairings
in the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import (
    AdamState,
    Mlp,
    MlpSpec,
    ParameterSet,
    adam_step,
    forward,
    init_linear,
    linear,
)
from .tensor import NonFiniteError, Tensor, as_tensor

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_MIN, LOGVAR_MAX = -8.0, 8.0


class VariationalNetwork:
    """Gaussian head ``x -> (mu(x), log sigma^2(x))`` with ``dim`` outputs each.

    ``hidden=()`` gives purely linear heads.
    """

    def __init__(self, dim, hidden=(128, 128), seed=0, activation="relu"):
        self.dim = int(dim)
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        self.backbone = None
        self.activation = activation
        width = self.dim
        if hidden:
            # Mlp ends linear; the activation on its output is applied in heads()
            spec = MlpSpec((self.dim, *hidden), (activation,) * (len(hidden) - 1))
            self.backbone = Mlp(spec, seed=seed, params=self.params, prefix="backbone")
            width = hidden[-1]
        init_linear(self.params, "mu", width, self.dim, rng, scale=1.0 / math.sqrt(width))
        init_linear(self.params, "logvar", width, self.dim, rng, scale=0.1 / math.sqrt(width))

    def heads(self, x):
        x = as_tensor(x)
        if x.shape[-1] != self.dim:
            raise ValueError(f"x has dimension {x.shape[-1]}, estimator expects {self.dim}")
        h = x
        if self.backbone is not None:
            h = forward(self.backbone, x)
            h = h.relu() if self.activation == "relu" else h.gelu()
        mu = linear(self.params, "mu", h)
        logvar = linear(self.params, "logvar", h).clip(LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar


@dataclass
class RepresentationBatch:
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        X = self.X.data if isinstance(self.X, Tensor) else np.asarray(self.X, dtype=np.float64)
        Y = self.Y.data if isinstance(self.Y, Tensor) else np.asarray(self.Y, dtype=np.float64)
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("X and Y must be N x D matrices")
        if X.shape != Y.shape:
            raise ValueError(f"X {X.shape} and Y {Y.shape} must have the same shape")
        if X.shape[0] < 1:
            raise ValueError("empty batch")
        self.X, self.Y = X, Y

    @property
    def n(self):
        return self.X.shape[0]


@dataclass
class MiEstimate:
    value: float
    n: int
    nll: float


def _gaussian_logpdf(y, mu, logvar):
    """Elementwise log N(y; mu, exp(logvar))."""
    diff = y - mu
    return (logvar + LOG_2PI) * -0.5 - diff.square() / (logvar.exp() * 2.0)


def log_likelihood(net: VariationalNetwork, x, y) -> Tensor:
    """log q(y|x) summed over dimensions; ``x``, ``y`` are (D,) or (N, D)."""
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"x {x.shape} and y {y.shape} differ in shape")
    mu, logvar = net.heads(x)
    return _gaussian_logpdf(y, mu, logvar).sum(axis=-1)


def nll_loss(net: VariationalNetwork, batch: RepresentationBatch) -> Tensor:
    """Mean negative log-likelihood of matched pairs; x and y enter as constants."""
    if batch.n < 1:
        raise ValueError("empty batch")
    return -log_likelihood(net, Tensor(batch.X), Tensor(batch.Y)).mean()


def mi_tensor(net: VariationalNetwork, x, y) -> Tensor:
    """vCLUB estimate as a differentiable scalar.

    Uses the full N x N double sum (diagonal included). The sum runs over the
    symmetrised matrix ``A + A.T`` with an exactly rounded total, so a head that
    ignores ``x`` and single-pair batches give exactly zero, and permuting
    the pairs does not change the result.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.ndim != 2 or x.shape != y.shape:
        raise ValueError(f"x {x.shape} and y {y.shape} must be matching N x D matrices")
    n, d = x.shape
    mu, logvar = net.heads(x)
    # cross[i, j] = log q(y_j | x_i)
    cross = _gaussian_logpdf(
        y.reshape(1, n, d), mu.reshape(n, 1, d), logvar.reshape(n, 1, d)
    ).sum(axis=-1)
    idx = np.arange(n)
    positive = cross[idx, idx].reshape(n, 1)
    a = positive - cross
    return (a + a.T).fsum() * (1.0 / (2.0 * n * n))


def estimate_mi(net: VariationalNetwork, batch: RepresentationBatch) -> MiEstimate:
    value = mi_tensor(net, Tensor(batch.X), Tensor(batch.Y)).item()
    nll = nll_loss(net, batch).item()
    if not math.isfinite(value):
        raise NonFiniteError("non-finite MI estimate")
    return MiEstimate(value=value, n=batch.n, nll=nll)


def train_estimator(net: VariationalNetwork, batch: RepresentationBatch, steps, opt: AdamState):
    """Run ``steps`` Adam updates of the estimator on ``batch``.

    Returns the NLL measured before each update followed by the final NLL.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    trajectory = []
    for _ in range(int(steps)):
        net.params.zero_grad()
        loss = nll_loss(net, batch)
        trajectory.append(loss.item())
        loss.backward()
        adam_step(net.params, opt)
    trajectory.append(nll_loss(net, batch).item())
    return trajectory


# -- oracles ---------------------------------------------------------------


def gaussian_mi_oracle(rho, d=1):
    """Exact MI (nats) of ``d`` independent bivariate Gaussian pairs with correlation ``rho``."""
    if not abs(rho) < 1.0:
        raise ValueError("|rho| must be < 1")
    if d < 1:
        raise ValueError("d must be >= 1")
    return -0.5 * d * math.log1p(-rho * rho)


def gaussian_club_oracle(rho, d=1):
    """vCLUB value when q equals the true Gaussian conditional: d * rho^2 / (1 - rho^2)."""
    if not abs(rho) < 1.0:
        raise ValueError("|rho| must be < 1")
    return d * rho * rho / (1.0 - rho * rho)


def numeric_mi_oracle(joint_density, bounds, resolution):
    """Riemann-sum MI of a 2-D density on ``bounds=((x0, x1), (y0, y1))``.

    ``bounds=(lo, hi)`` means the square ``[lo, hi]^2``. ``joint_density(X, Y)``
    is evaluated on cell centres of a ``resolution`` (int or (nx, ny)) grid.
    """
    if np.isscalar(bounds[0]):
        bounds = (tuple(bounds), tuple(bounds))
    (x0, x1), (y0, y1) = bounds
    nx, ny = (resolution, resolution) if np.isscalar(resolution) else resolution
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    xs = x0 + (np.arange(nx) + 0.5) * dx
    ys = y0 + (np.arange(ny) + 0.5) * dy
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    dens = np.asarray(joint_density(X, Y), dtype=np.float64)
    if np.any(dens < 0) or not np.all(np.isfinite(dens)):
        raise ValueError("density must be finite and non-negative")
    p = dens * dx * dy
    mass = p.sum()
    if abs(mass - 1.0) > 1e-3:
        raise ValueError(f"grid too coarse or too small: discretized mass {mass:.6f}")
    p = p / mass
    px = p.sum(axis=1, keepdims=True)
    py = p.sum(axis=0, keepdims=True)
    nz = p > 0
    ratio = p[nz] / (px * py)[nz]
    return float(np.sum(p[nz] * np.log(ratio)))


def sample_correlated_gaussian(n, d, rho, rng):
    """x ~ N(0, I); y = rho x + sqrt(1 - rho^2) eps, coordinatewise."""
    x = rng.standard_normal((n, d))
    y = rho * x + math.sqrt(1.0 - rho * rho) * rng.standard_normal((n, d))
    return x, y
