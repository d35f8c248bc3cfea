"""Desk-scale end-to-end run: corpus -> pretraining -> stage 2 per held-out content -> SROCC."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dispa.evaluation import evaluate_predictions, plan_folds
from dispa.mae import PretrainConfig, pretrain
from dispa.pointcloud import read_ply, reference_path, resolve, synthesize_corpus
from dispa.train import TrainConfig, predict, prepare_item, train_run, use_best

N_POINTS = 6000

PRETRAIN = dict(epochs=8, batch=8, lr=1e-3, resolution=128, rotations=1, radius=1, rep_dim=16)
STAGE2 = dict(epochs=60, lr=1e-3, lr_decay=0.97, weight_decay=1e-3, grids=8, minipatch=16)


@dataclass
class SeedRun:
    seed: int
    pretrain_losses: list
    stage2_first_last: list = field(default_factory=list)
    fold_srocc: list = field(default_factory=list)

    @property
    def pretrain_fraction(self):
        d = np.diff(self.pretrain_losses)
        return float(np.mean(d < 0))

    @property
    def srocc(self):
        return float(np.mean(self.fold_srocc))


@dataclass
class SmokeResult:
    runs: list
    minutes: float

    @property
    def pretrain_fraction(self):
        return min(r.pretrain_fraction for r in self.runs)

    @property
    def stage2_falls(self):
        return all(last < first for r in self.runs for first, last in r.stage2_first_last)

    @property
    def mean_srocc(self):
        return float(np.mean([r.srocc for r in self.runs]))

    def summary(self):
        per = ", ".join(f"seed {r.seed}: {r.srocc:.3f}" for r in self.runs)
        return (f"pretrain decreasing on >= {self.pretrain_fraction:.0%} of epochs; stage-2 loss "
                f"falls in every fold {self.stage2_falls}; held-out SROCC mean "
                f"{self.mean_srocc:.3f} ({per}); {self.minutes:.1f} min")


def run_seed(root: Path, seed: int, n_contents=8) -> SeedRun:
    corpus = root / f"corpus{seed}"
    records = synthesize_corpus(corpus, n_contents=n_contents, n_points=N_POINTS, seed=seed)
    refs = {c: read_ply(reference_path(corpus, c)) for c in {r.content_id for r in records}}
    clouds = {r.path: read_ply(resolve(corpus, r.path)) for r in records}

    # label-free pretraining sees every (distorted, reference) pair
    pcfg = PretrainConfig(**PRETRAIN, seed=seed)
    pre = pretrain(pcfg, [(clouds[r.path], refs[r.content_id]) for r in records])
    F = pre.encoder
    run = SeedRun(seed, pre.epoch_losses)

    cfg = TrainConfig(**STAGE2, seed=seed)
    items = {r.path: prepare_item(r.path, r.content_id, clouds[r.path], r.mos, F, pcfg, cfg, seed)
             for r in records}
    plan = plan_folds([r.content_id for r in records], "kfold", seed, k=n_contents)
    by_content = {}
    for it in items.values():
        by_content.setdefault(it.content_id, []).append(it)

    def predict_fold(k, test_items):
        train = [it for c in plan.folds[k].train for it in by_content[c]]
        res = train_run(train, F, cfg)
        means = [e["mean_total"] for e in res.log.epochs]
        run.stage2_first_last.append((means[0], means[-1]))
        return predict(use_best(res), test_items)

    report = evaluate_predictions(plan, predict_fold, by_content)
    run.fold_srocc = [f.srocc for f in report.folds]
    return run


def run_smoke(root, seeds=(0, 1, 2)) -> SmokeResult:
    t = time.perf_counter()
    runs = [run_seed(Path(root), s) for s in seeds]
    return SmokeResult(runs, (time.perf_counter() - t) / 60)
