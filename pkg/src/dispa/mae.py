"""Masked cross-reconstruction pretraining of the content encoder.

Distorted renders are cut into ``p x p`` patches, half of them are hidden,
the visible ones are encoded, and a per-patch decoder predicts the render of
the *reference* cloud for every patch position.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import (
    AdamState,
    ParameterSet,
    adam_state_arrays,
    adam_step,
    init_linear,
    linear,
    load_checkpoint,
    restore_adam_state,
    save_checkpoint,
)
from .pointcloud import _sub_seed, normalize_unit_sphere
from .render import render_pair
from .tensor import Tensor, concat

log = logging.getLogger(__name__)

# encoders see pixels standardised as (v - PIXEL_MEAN) / PIXEL_STD
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


# -- patches and masks -----------------------------------------------------


def patchify(img, p=16):
    """``H x W x C`` array -> ``(H/p * W/p) x (p*p*C)`` patches in raster order."""
    img = np.asarray(img)
    h, w, c = img.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    return img.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape(-1, p * p * c)


def unpatchify(patches, h, w, p=16, c=3):
    patches = np.asarray(patches)
    return patches.reshape(h // p, w // p, p, p, c).transpose(0, 2, 1, 3, 4).reshape(h, w, c)


@dataclass(frozen=True)
class MaskSet:
    masked: np.ndarray  # sorted unique indices
    n_patches: int
    ratio: float

    @property
    def visible(self):
        keep = np.ones(self.n_patches, dtype=bool)
        keep[self.masked] = False
        return np.nonzero(keep)[0]


def mask_count(n_patches, ratio):
    return int(math.floor(ratio * n_patches + 0.5))


def sample_mask(n_patches, ratio=0.5, seed=0) -> MaskSet:
    if not 0.0 < ratio < 1.0:
        raise ValueError("mask ratio must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    k = mask_count(n_patches, ratio)
    masked = np.sort(rng.choice(n_patches, size=k, replace=False))
    return MaskSet(masked, int(n_patches), float(ratio))


def _full_mask(n_patches):
    return MaskSet(np.zeros(0, dtype=np.int64), int(n_patches), 0.0)


# -- encoder / decoder -----------------------------------------------------


class PatchEncoder:
    """Patch embedding + positional table + K residual mixing blocks + pooled projection.

    Each mixing block applies a per-patch two-layer feed-forward update and
    then adds a projection of the mean token (cross-patch context).
    """

    def __init__(self, n_patches, patch_dim=768, embed_dim=64, out_dim=64, depth=2, seed=0):
        self.n_patches = int(n_patches)
        self.patch_dim = int(patch_dim)
        self.embed_dim = int(embed_dim)
        self.out_dim = int(out_dim)
        self.depth = int(depth)
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        init_linear(self.params, "embed", patch_dim, embed_dim, rng, scale=1.0 / math.sqrt(patch_dim))
        self.params.add("pos", rng.normal(0.0, 0.02, (n_patches, embed_dim)))
        for k in range(depth):
            init_linear(self.params, f"block{k}.ff1", embed_dim, embed_dim, rng)
            init_linear(self.params, f"block{k}.ff2", embed_dim, embed_dim, rng,
                        scale=0.5 / math.sqrt(embed_dim))
            init_linear(self.params, f"block{k}.ctx", embed_dim, embed_dim, rng,
                        scale=0.5 / math.sqrt(embed_dim))
        init_linear(self.params, "out", embed_dim, out_dim, rng, scale=1.0 / math.sqrt(embed_dim))

    def encode(self, patches, visible=None):
        """Encode ``patches`` (B, N, patch_dim) restricted to ``visible`` (B, K) indices.

        Returns (tokens (B, K, E), pooled (B, out_dim)). Masked patches are
        never read.
        """
        patches = np.asarray(patches, dtype=np.float64)
        if patches.ndim != 3 or patches.shape[1:] != (self.n_patches, self.patch_dim):
            raise ValueError(
                f"expected (B, {self.n_patches}, {self.patch_dim}) patches, got {patches.shape}"
            )
        b = patches.shape[0]
        if visible is None:
            visible = np.broadcast_to(np.arange(self.n_patches), (b, self.n_patches))
        visible = np.asarray(visible, dtype=np.int64)
        if visible.ndim != 2 or visible.shape[0] != b:
            raise ValueError("visible indices must be (B, K)")
        if visible.shape[1] == 0:
            raise ValueError("all patches are masked")
        rows = np.arange(b)[:, None]
        seen = Tensor((patches[rows, visible] - PIXEL_MEAN) / PIXEL_STD)
        h = linear(self.params, "embed", seen) + self.params["pos"][visible]
        for k in range(self.depth):
            upd = linear(self.params, f"block{k}.ff1", h).relu()
            h = h + linear(self.params, f"block{k}.ff2", upd)
            h = h + linear(self.params, f"block{k}.ctx", h.mean(axis=1, keepdims=True))
        pooled = linear(self.params, "out", h.mean(axis=1))
        return h, pooled

    def __call__(self, patches):
        return self.encode(patches)[1]


class ReconstructionDecoder:
    """Per-slot linear decoder; hidden slots start from a shared mask token."""

    def __init__(self, n_patches, patch_dim=768, embed_dim=64, seed=0):
        self.n_patches = int(n_patches)
        self.patch_dim = int(patch_dim)
        rng = np.random.default_rng(seed)
        self.params = ParameterSet()
        self.params.add("mask_token", rng.normal(0.0, 0.02, (embed_dim,)))
        self.params.add("pos", rng.normal(0.0, 0.02, (n_patches, embed_dim)))
        init_linear(self.params, "ctx", embed_dim, embed_dim, rng, scale=0.5 / math.sqrt(embed_dim))
        init_linear(self.params, "out", embed_dim, patch_dim, rng, scale=1.0 / math.sqrt(embed_dim))
        self.params["out.bias"].data[:] = 0.5

    def __call__(self, tokens, visible, masked):
        """Predict all ``n_patches`` patches; returns (B, N, patch_dim)."""
        visible = np.asarray(visible, dtype=np.int64)
        masked = np.asarray(masked, dtype=np.int64)
        b, k, _ = tokens.shape
        if visible.shape != (b, k):
            raise ValueError("token count does not match visible count")
        if masked.shape[0] != b or k + masked.shape[1] != self.n_patches:
            raise ValueError("visible + masked must cover every patch")
        pos = self.params["pos"]
        parts = [tokens + pos[visible]]
        if masked.shape[1]:
            parts.append(pos[masked] + self.params["mask_token"])
        slots = concat(parts, axis=1) if len(parts) > 1 else parts[0]
        order = np.concatenate([visible, masked], axis=1)
        inv = np.argsort(order, axis=1, kind="stable")
        slots = slots[np.arange(b)[:, None], inv]
        context = linear(self.params, "ctx", tokens.mean(axis=1, keepdims=True))
        return linear(self.params, "out", slots + context)


def encode_visible(enc: PatchEncoder, patches, mask: MaskSet):
    """Encode one image's visible patches; returns (tokens (K, E), x (D,)) as arrays."""
    patches = np.asarray(patches)[None]
    tokens, x = enc.encode(patches, mask.visible[None])
    return tokens.data[0], x.data[0]


def reconstruct(dec: ReconstructionDecoder, tokens, mask: MaskSet, h, w, p=16):
    """Decode one image from its visible tokens into an ``h x w x 3`` float image."""
    t = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens)[None])
    if t.ndim == 2:
        t = t.reshape(1, *t.shape)
    out = dec(t, mask.visible[None], mask.masked[None])
    return unpatchify(out.data[0], h, w, p)


def rec_loss(predicted, reference):
    """Sum over views and pixels of squared error (total, not mean)."""
    if isinstance(predicted, Tensor):
        return (predicted - reference).square().sum()
    pred = np.asarray(predicted, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    diff = pred - ref
    return float(np.sum(diff * diff))


# -- pretraining loop ------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 20
    batch: int = 8
    lr: float = 3e-4
    mask_ratio: float = 0.5
    patch: int = 16
    resolution: int = 512
    n_views: int = 6
    rotations: int = 6
    radius: int = 2
    embed_dim: int = 64
    rep_dim: int = 64
    depth: int = 2
    masked_only: bool = False
    seed: int = 0

    @property
    def n_patches(self):
        return (self.resolution // self.patch) ** 2

    @property
    def patch_dim(self):
        return self.patch * self.patch * 3


def build_content_model(cfg: PretrainConfig):
    enc = PatchEncoder(cfg.n_patches, cfg.patch_dim, cfg.embed_dim, cfg.rep_dim, cfg.depth,
                       seed=_sub_seed("encoder", cfg.seed) % (2**32))
    dec = ReconstructionDecoder(cfg.n_patches, cfg.patch_dim, cfg.embed_dim,
                                seed=_sub_seed("decoder", cfg.seed) % (2**32))
    return enc, dec


def pose_seed(seed, epoch, item, rotation):
    # 0 is reserved for the identity pose
    return _sub_seed("pose", seed, epoch, item, rotation) or 1


def _views_to_patches(viewset, p):
    return np.stack([patchify(v.as_float(), p) for v in viewset])


def pretrain_batch_loss(enc, dec, distorted_patches, reference_patches, masks, n_samples,
                        masked_only=False):
    """Mean per-sample reconstruction loss for a stack of (B, N, P) patch arrays."""
    visible = np.stack([m.visible for m in masks])
    hidden = np.stack([m.masked for m in masks])
    tokens, _ = enc.encode(distorted_patches, visible)
    pred = dec(tokens, visible, hidden)
    target = Tensor(reference_patches)
    if masked_only:
        rows = np.arange(len(masks))[:, None]
        diff = pred[rows, hidden] - target[rows, hidden]
    else:
        diff = pred - target
    return diff.square().sum() * (1.0 / n_samples)


@dataclass
class PretrainResult:
    encoder: PatchEncoder
    decoder: ReconstructionDecoder
    epoch_losses: list
    opt: AdamState


def pretrain(cfg: PretrainConfig, pairs, checkpoint=None, resume=None, log_path=None):
    """Train the content encoder on ``pairs`` of (distorted, reference) PointClouds.

    ``resume`` may name a checkpoint written by an earlier call; training
    continues from the epoch stored there and reproduces the uninterrupted
    trajectory.
    """
    pairs = [(normalize_unit_sphere(d), normalize_unit_sphere(r)) for d, r in pairs]
    if not pairs:
        raise ValueError("empty corpus")
    enc, dec = build_content_model(cfg)
    params = ParameterSet()
    params.update(enc.params, "F.")
    params.update(dec.params, "D.")
    opt = AdamState(lr=cfg.lr)
    losses = []
    start = 0
    if resume is not None:
        arrays = load_checkpoint(resume)
        params.load_state(arrays)
        restore_adam_state(opt, arrays)
        start = int(arrays["meta.epoch"][0])
        losses = list(arrays["meta.losses"]) if "meta.losses" in arrays else []

    samples = [(i, r) for i in range(len(pairs)) for r in range(cfg.rotations)]
    p = cfg.patch
    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng(_sub_seed("pretrain-order", cfg.seed, epoch))
        order = rng.permutation(len(samples))
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch):
            chunk = [samples[k] for k in order[b0 : b0 + cfg.batch]]
            dist_p, ref_p, masks = [], [], []
            for item, rot in chunk:
                ps = pose_seed(cfg.seed, epoch, item, rot)
                dv, rv = render_pair(*pairs[item], pose_seed=ps, n_views=cfg.n_views,
                                     resolution=cfg.resolution, radius=cfg.radius)
                dist_p.append(_views_to_patches(dv, p))
                ref_p.append(_views_to_patches(rv, p))
                for n in range(cfg.n_views):
                    ms = _sub_seed("mask", cfg.seed, epoch, item, rot, n)
                    masks.append(sample_mask(cfg.n_patches, cfg.mask_ratio, ms))
            params.zero_grad()
            loss = pretrain_batch_loss(enc, dec, np.concatenate(dist_p), np.concatenate(ref_p),
                                       masks, len(chunk), cfg.masked_only)
            batch_losses.append(loss.item())
            loss.backward()
            adam_step(params, opt)
        losses.append(float(np.mean(batch_losses)))
        log.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
    if checkpoint is not None:
        save_pretrain_checkpoint(checkpoint, cfg, params, opt, losses)
    if log_path is not None:
        with open(log_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss"])
            for e, v in enumerate(losses):
                w.writerow([e, repr(v)])
    return PretrainResult(enc, dec, losses, opt)


def save_pretrain_checkpoint(path, cfg, params, opt, losses):
    arrays = dict(params.state())
    arrays.update(adam_state_arrays(opt))
    arrays["meta.epoch"] = np.array([float(len(losses))])
    arrays["meta.losses"] = np.asarray(losses, dtype=np.float64)
    arrays.update(pretrain_config_arrays(cfg))
    save_checkpoint(path, arrays)


def load_content_encoder(path):
    """Rebuild the pretrained content encoder from a pretraining checkpoint."""
    return content_encoder_from_arrays(load_checkpoint(path))


def pretrain_config_arrays(cfg):
    return {f"cfg.{key}": np.array([float(value)]) for key, value in asdict(cfg).items()}


def content_encoder_from_arrays(arrays):
    """Encoder ``F`` and its config from any checkpoint carrying ``F.*`` and ``cfg.*``."""
    fields = PretrainConfig.__dataclass_fields__
    kw = {}
    for key, f in fields.items():
        if f"cfg.{key}" in arrays:
            raw = arrays[f"cfg.{key}"][0]
            kw[key] = bool(raw) if f.type in ("bool", bool) else (
                float(raw) if f.type in ("float", float) else int(raw))
    cfg = PretrainConfig(**kw)
    enc, _ = build_content_model(cfg)
    state = {k[2:]: v for k, v in arrays.items() if k.startswith("F.")}
    enc.params.load_state(state)
    return enc, cfg
