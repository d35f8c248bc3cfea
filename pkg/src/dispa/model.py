"""Dual-branch quality model: frozen content encoder, distortion encoder, regressor."""

from __future__ import annotations

import numpy as np

from .mae import PatchEncoder, patchify
from .nn import Mlp, MlpSpec, ParameterSet, load_checkpoint, save_checkpoint
from .tensor import Tensor, as_tensor, concat


class QualityModel:
    """``F`` (frozen, content), ``G`` (distortion) and regressor ``H``.

    Only ``G`` and ``H`` are registered in :attr:`params`; ``F`` is used as a
    constant feature extractor.
    """

    def __init__(self, content: PatchEncoder, distortion: PatchEncoder, hidden=64, seed=0):
        if content.out_dim != distortion.out_dim:
            raise ValueError("content and distortion encoders must share the output dimension")
        self.content = content
        self.distortion = distortion
        self.dim = content.out_dim
        self.regressor = Mlp(MlpSpec((2 * self.dim, hidden, 1)), seed=seed, prefix="fc")
        self.params = ParameterSet()
        self.params.update(distortion.params, "G.")
        self.params.update(self.regressor.params, "H.")

    def content_params(self):
        out = ParameterSet()
        out.update(self.content.params, "F.")
        return out

    def state(self):
        arrays = {f"F.{k}": v for k, v in self.content.params.state().items()}
        arrays.update(self.params.state())
        return arrays

    def load_state(self, arrays):
        self.content.params.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("F.")})
        self.params.load_state(arrays)


def content_features(F: PatchEncoder, view_patches) -> np.ndarray:
    """Mean over views of the pooled content encoding with every patch visible.

    ``view_patches`` is (V, N, P) for one item or (B, V, N, P) for a batch.
    """
    arr = np.asarray(view_patches, dtype=np.float64)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    b, v = arr.shape[:2]
    pooled = F(arr.reshape(b * v, *arr.shape[2:])).data.reshape(b, v, -1)
    out = pooled.mean(axis=1)
    return out[0] if single else out


def views_to_patches(viewset, p=16):
    return np.stack([patchify(view.as_float(), p) for view in viewset])


def forward_quality(model: QualityModel, x, map_patches):
    """Return (y, q_hat) for a batch: y = G(map) (B, D), q_hat = H([x, y]) (B,)."""
    x = as_tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ValueError(f"x must be (B, {model.dim}), got {x.shape}")
    _, y = model.distortion.encode(map_patches)
    if y.shape[0] != x.shape[0]:
        raise ValueError("x and map batch sizes differ")
    return y, regress(model, x, y)


def regress(model: QualityModel, x, y):
    """q_hat = H([x, y]) as a (B,) tensor."""
    x = as_tensor(x)
    return model.regressor(concat([x, y], axis=1)).reshape(x.shape[0])


def rank_loss(q_hat, q):
    """Pairwise hinge: mean over all (i, j) of max(0, |q_i - q_j| - e_ij (q_hat_i - q_hat_j))."""
    q_hat = as_tensor(q_hat)
    q = np.asarray(q, dtype=np.float64)
    b = q.shape[0]
    if b < 1 or q_hat.shape != (b,):
        raise ValueError("q_hat and q must be equal-length vectors")
    sign = np.where(q[:, None] >= q[None, :], 1.0, -1.0)
    margin = np.abs(q[:, None] - q[None, :])
    gap = q_hat.reshape(b, 1) - q_hat.reshape(1, b)
    return (Tensor(margin) - gap * sign).relu().sum() * (1.0 / (b * b))


def mse_loss(q_hat, q):
    q_hat = as_tensor(q_hat)
    return (q_hat - np.asarray(q, dtype=np.float64)).square().mean()


def total_loss(q_hat, q, mi, lambda_rank=1.0, lambda_mi=0.01):
    """MSE + lambda_rank * rank loss + lambda_mi * MI estimate.

    Returns (total, mse, rank) tensors.
    """
    if lambda_rank < 0 or lambda_mi < 0:
        raise ValueError("loss weights must be non-negative")
    mse = mse_loss(q_hat, q)
    rank = rank_loss(q_hat, q)
    total = mse + rank * lambda_rank + as_tensor(mi) * lambda_mi
    return total, mse, rank


def save_model(path, model: QualityModel, extra=None):
    arrays = model.state()
    if extra:
        arrays.update(extra)
    save_checkpoint(path, arrays)


def load_model_arrays(path):
    return load_checkpoint(path)
