"""Alternating optimisation of the MI estimator and the quality model."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgio
from .club import RepresentationBatch, VariationalNetwork, mi_tensor, train_estimator
from .mae import (
    PatchEncoder,
    PretrainConfig,
    content_encoder_from_arrays,
    patchify,
    pretrain_config_arrays,
)
from .minipatch import GridSpec, build_map
from .model import (
    QualityModel,
    content_features,
    forward_quality,
    regress,
    total_loss,
    views_to_patches,
)
from .nn import AdamState, adam_step, load_checkpoint, save_checkpoint
from .pointcloud import _sub_seed, normalize_unit_sphere, read_ply, resolve
from .render import render_views
from .tensor import NonFiniteError, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch: int = 16
    inner_steps: int = 10
    epochs: int = 150
    lr: float = 0.003
    lr_decay: float = 0.95
    weight_decay: float = 1e-4
    est_lr: float = 1e-3
    est_hidden: tuple = (128, 128)
    lambda_rank: float = 1.0
    lambda_mi: float = 0.01
    grids: int = 16
    minipatch: int = 32
    depth: int = 2
    embed_dim: int = 64
    hidden: int = 64
    protocol: str = "kfold"
    folds: int = 5
    fold: int = -1
    test_size: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.batch < 2:
            raise ValueError("batch size must be >= 2 for the ranking loss")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        self.est_hidden = tuple(self.est_hidden)


@dataclass
class Item:
    key: str
    content_id: str
    x: np.ndarray  # frozen content representation (D,)
    map_patches: np.ndarray  # (N, P) patches of the mini-patch map
    mos: float


# -- data preparation ------------------------------------------------------


def item_pose_seed(seed, key):
    return _sub_seed("stage2-pose", seed, key) or 1


def prepare_item(key, content_id, cloud, mos, F: PatchEncoder, pcfg: PretrainConfig,
                 cfg: TrainConfig, seed=0) -> Item:
    """Render ``cloud`` once at a fixed pose, encode it with F and build its mini-patch map."""
    pc = normalize_unit_sphere(cloud)
    views = render_views(pc, pcfg.n_views, pcfg.resolution, item_pose_seed(seed, key), pcfg.radius)
    x = content_features(F, views_to_patches(views, pcfg.patch))
    spec = GridSpec(cfg.grids, cfg.minipatch, pcfg.resolution, pcfg.resolution)
    mp = build_map(views, spec, seed=_sub_seed("map", seed, key))
    return Item(key, content_id, x, patchify(mp.as_float(), pcfg.patch), float(mos))


def prepare_items(records, manifest_dir, F, pcfg, cfg, seed=0, cache_dir=None):
    """Items for manifest ``records``; cached as ``.npz`` under ``cache_dir`` when given."""
    items = []
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    for r in records:
        path = resolve(manifest_dir, r.path)
        if not path.exists():
            raise FileNotFoundError(f"manifest entry not found: {path}")
        cached = None
        if cache is not None:
            cached = cache / f"{_sub_seed('cache', seed, r.path, pcfg.resolution, cfg.grids, cfg.minipatch):016x}.npz"
            if cached.exists():
                z = np.load(cached)
                items.append(Item(r.path, r.content_id, z["x"], z["map"], r.mos))
                continue
        it = prepare_item(r.path, r.content_id, read_ply(path), r.mos, F, pcfg, cfg, seed)
        if cached is not None:
            np.savez(cached, x=it.x, map=it.map_patches)
        items.append(it)
    return items


# -- one iteration ---------------------------------------------------------


@dataclass
class Trainer:
    model: QualityModel
    estimator: VariationalNetwork
    main_opt: AdamState
    est_opt: AdamState
    cfg: TrainConfig
    mos_lo: float = 0.0
    mos_hi: float = 1.0

    def scale(self, mos):
        return (np.asarray(mos, dtype=np.float64) - self.mos_lo) / (self.mos_hi - self.mos_lo)

    def unscale(self, q):
        return np.asarray(q) * (self.mos_hi - self.mos_lo) + self.mos_lo


def build_trainer(F: PatchEncoder, cfg: TrainConfig) -> Trainer:
    seed = cfg.seed
    G = PatchEncoder(F.n_patches, F.patch_dim, cfg.embed_dim, F.out_dim, cfg.depth,
                     seed=_sub_seed("G", seed) % 2**32)
    model = QualityModel(F, G, hidden=cfg.hidden, seed=_sub_seed("H", seed) % 2**32)
    est = VariationalNetwork(F.out_dim, cfg.est_hidden, seed=_sub_seed("phi", seed) % 2**32)
    main_opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    est_opt = AdamState(lr=cfg.est_lr)
    return Trainer(model, est, main_opt, est_opt, cfg)


def train_step(trainer: Trainer, x, map_patches, q, batch_id=0, audit=False):
    """One iteration: fit the estimator on this batch, then update G and H.

    ``q`` is the already-scaled target. Returns a dict log row; with
    ``audit=True`` it also carries parameter checksums around both sub-steps.
    """
    cfg = trainer.cfg
    model, est = trainer.model, trainer.estimator
    x = np.asarray(x, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    row = {"batch": batch_id}
    sums = {}

    def snap(tag):
        if audit:
            sums[tag] = (
                model.content_params().checksum(),
                model.params.checksum(),
                est.params.checksum(),
            )

    try:
        model.params.zero_grad()
        _, y = model.distortion.encode(map_patches)
        batch = RepresentationBatch(x, y.data)
        snap("start")
        traj = train_estimator(est, batch, cfg.inner_steps, trainer.est_opt)
        snap("after_estimator")
        mi = mi_tensor(est, Tensor(x), y)
        q_hat = regress(model, x, y)
        total, mse, rank = total_loss(q_hat, q, mi, cfg.lambda_rank, cfg.lambda_mi)
        total.backward()
        adam_step(model.params, trainer.main_opt)
        snap("after_main")
    except NonFiniteError as exc:
        raise TrainingError(f"non-finite value in batch {batch_id}: {exc}") from exc
    row.update(
        total=total.item(), mse=mse.item(), rank=rank.item(), mi=mi.item(),
        nll_before=traj[0], nll_after=traj[-1],
    )
    for k, v in row.items():
        if isinstance(v, float) and not math.isfinite(v):
            raise TrainingError(f"non-finite {k} in batch {batch_id}")
    if audit:
        row["checksums"] = sums
    return row


# -- epochs ----------------------------------------------------------------


@dataclass
class EpochLog:
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def write_csv(self, path):
        keys = ["epoch", "batch", "lr", "total", "mse", "rank", "mi", "nll_before", "nll_after"]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(keys)
            for r in self.rows:
                w.writerow([r[k] if isinstance(r[k], int) else repr(float(r[k])) for k in keys])


@dataclass
class TrainResult:
    trainer: Trainer
    log: EpochLog
    best_epoch: int
    best_state: dict


def make_batches(n, batch, rng):
    order = rng.permutation(n)
    chunks = [order[i : i + batch] for i in range(0, n, batch)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def train_run(items, F: PatchEncoder, cfg: TrainConfig, checkpoint=None, log_path=None,
              pcfg: PretrainConfig | None = None):
    """Train G and H on ``items``; keeps the epoch with the lowest mean total loss.

    With ``checkpoint`` set, the best state is written there together with a
    ``.toml`` sidecar holding ``cfg``; passing ``pcfg`` makes the checkpoint
    self-contained (the content encoder can be rebuilt from it alone).
    """
    if len(items) < 2:
        raise ValueError("need at least two training items")
    trainer = build_trainer(F, cfg)
    mos = np.array([it.mos for it in items])
    trainer.mos_lo, trainer.mos_hi = float(mos.min()), float(mos.max())
    if trainer.mos_hi == trainer.mos_lo:
        trainer.mos_hi = trainer.mos_lo + 1.0
    q_all = trainer.scale(mos)
    X = np.stack([it.x for it in items])
    M = np.stack([it.map_patches for it in items])

    elog = EpochLog()
    best = (math.inf, -1, None)
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay**epoch
        trainer.main_opt.lr = lr
        rng = np.random.default_rng(_sub_seed("stage2-order", cfg.seed, epoch))
        totals = []
        for b, idx in enumerate(make_batches(len(items), cfg.batch, rng)):
            row = train_step(trainer, X[idx], M[idx], q_all[idx], batch_id=b)
            row.update(epoch=epoch, lr=lr)
            elog.rows.append(row)
            totals.append(row["total"])
        mean_total = float(np.mean(totals))
        elog.epochs.append({"epoch": epoch, "lr": lr, "mean_total": mean_total})
        log.info("epoch %d lr %.6g mean total %.6f", epoch, lr, mean_total)
        if mean_total < best[0]:
            best = (mean_total, epoch, trainer.model.params.state())
    result = TrainResult(trainer, elog, best[1], best[2])
    if checkpoint is not None:
        save_trained(checkpoint, result, pcfg)
    if log_path is not None:
        elog.write_csv(log_path)
    return result


def use_best(result: TrainResult):
    result.trainer.model.params.load_state(result.best_state)
    return result.trainer


def save_trained(path, result: TrainResult, pcfg: PretrainConfig | None = None):
    tr = result.trainer
    arrays = {f"F.{k}": v for k, v in tr.model.content.params.state().items()}
    if pcfg is not None:
        arrays.update(pretrain_config_arrays(pcfg))
    arrays.update(result.best_state)
    arrays["meta.mos_range"] = np.array([tr.mos_lo, tr.mos_hi])
    arrays["meta.best_epoch"] = np.array([float(result.best_epoch)])
    save_checkpoint(path, arrays)
    cfgio.write_config(Path(path).with_suffix(".toml"), config_dict(tr.cfg))


def load_trained(path, cfg: TrainConfig | None = None):
    """Rebuild a :class:`Trainer` from a self-contained stage-2 checkpoint.

    Returns (trainer, pretrain_config). ``cfg`` defaults to the ``.toml``
    sidecar written next to the checkpoint.
    """
    arrays = load_checkpoint(path)
    if cfg is None:
        side = Path(path).with_suffix(".toml")
        cfg = cfgio.from_mapping(TrainConfig, cfgio.read_config(side)) if side.exists() else TrainConfig()
    F, pcfg = content_encoder_from_arrays(arrays)
    trainer = build_trainer(F, cfg)
    trainer.model.params.load_state(arrays)
    lo, hi = arrays["meta.mos_range"]
    trainer.mos_lo, trainer.mos_hi = float(lo), float(hi)
    return trainer, pcfg


def predict(trainer: Trainer, items, batch=64):
    """Predicted MOS (original scale) for ``items``."""
    out = []
    for i in range(0, len(items), batch):
        chunk = items[i : i + batch]
        x = np.stack([it.x for it in chunk])
        m = np.stack([it.map_patches for it in chunk])
        _, q_hat = forward_quality(trainer.model, x, m)
        out.append(q_hat.data)
    return trainer.unscale(np.concatenate(out))


def config_dict(cfg: TrainConfig):
    d = asdict(cfg)
    d["est_hidden"] = list(cfg.est_hidden)
    return d
