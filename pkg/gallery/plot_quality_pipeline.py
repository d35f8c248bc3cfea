"""
Training and evaluating the quality model
=========================================

A miniature version of the full pipeline: synthesize a corpus, pretrain the
content encoder, train the distortion branch with the MI penalty on all but
one content, and score the held-out content.
"""

import tempfile
from pathlib import Path

import numpy as np

from dispa.evaluation import fold_metrics, plan_folds
from dispa.mae import PretrainConfig, pretrain
from dispa.pointcloud import read_ply, reference_path, resolve, synthesize_corpus
from dispa.train import TrainConfig, predict, prepare_item, train_run, use_best

root = Path(tempfile.mkdtemp())
records = synthesize_corpus(root, n_contents=4, levels=(1, 3, 5, 7), n_points=4000, seed=0)
clouds = {r.path: read_ply(resolve(root, r.path)) for r in records}
refs = {c: read_ply(reference_path(root, c)) for c in {r.content_id for r in records}}
print(f"{len(records)} distorted clouds over {len(refs)} contents")

# %%
# Stage 1: label-free pretraining on (distorted, reference) pairs.
pcfg = PretrainConfig(epochs=3, batch=8, lr=1e-3, resolution=64, rotations=1, radius=1,
                      embed_dim=32, rep_dim=16)
F = pretrain(pcfg, [(clouds[r.path], refs[r.content_id]) for r in records]).encoder

# %%
# Stage 2 on one content-disjoint fold.
cfg = TrainConfig(epochs=15, batch=8, lr=1e-3, grids=4, minipatch=16, embed_dim=32, hidden=32)
items = [prepare_item(r.path, r.content_id, clouds[r.path], r.mos, F, pcfg, cfg) for r in records]
fold = plan_folds([r.content_id for r in records], k=4).folds[0]
train = [it for it in items if it.content_id in fold.train]
test = [it for it in items if it.content_id in fold.test]
res = train_run(train, F, cfg)
print("epoch mean total loss:", np.round([e["mean_total"] for e in res.log.epochs], 3))
print("last logged MI estimate:", round(res.log.rows[-1]["mi"], 3))

m = fold_metrics(0, predict(use_best(res), test), [it.mos for it in test])
print(f"held-out content {fold.test}: SROCC {m.srocc:.3f}  PLCC {m.plcc:.3f}  RMSE {m.rmse:.3f}")
