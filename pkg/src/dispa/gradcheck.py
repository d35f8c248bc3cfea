"""Central finite-difference checks for :class:`~dispa.nn.ParameterSet` gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheck:
    checked: int
    max_rel_error: float
    worst: tuple  # (name, flat index, analytic, numeric)

    def ok(self, tol=1e-4):
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(loss_fn, params, n_coords=100, seed=0, eps=1e-5, names=None) -> GradCheck:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. ``n_coords`` coordinates are drawn uniformly over all entries
    of the selected parameters (all of ``params`` by default).
    """
    names = list(params.names()) if names is None else list(names)
    params.zero_grad()
    loss_fn().backward()
    analytic = {n: params[n].grad.copy() for n in names}
    sizes = np.array([params[n].data.size for n in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_coords, int(sizes.sum())), replace=False)
    bounds = np.cumsum(sizes)

    worst = (None, -1, 0.0, 0.0)
    max_err = 0.0
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        name = names[k]
        idx = int(f - (bounds[k - 1] if k else 0))
        p = params[name]
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        up = loss_fn().item()
        view[idx] = orig - eps
        down = loss_fn().item()
        view[idx] = orig
        numeric = (up - down) / (2 * eps)
        a = float(analytic[name].reshape(-1)[idx])
        err = relative_error(a, numeric)
        if err > max_err:
            max_err, worst = err, (name, idx, a, numeric)
    return GradCheck(len(flat), max_err, worst)
