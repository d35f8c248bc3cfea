"""Command line entry point: ``dispa <command> ...``."""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import config as cfgio
from .club import (
    RepresentationBatch,
    VariationalNetwork,
    estimate_mi,
    gaussian_mi_oracle,
    sample_correlated_gaussian,
    train_estimator,
)
from .evaluation import Fold, FoldPlan, evaluate_predictions, plan_folds
from .mae import PretrainConfig, load_content_encoder, pretrain
from .minipatch import GridSpec, build_map, write_provenance
from .nn import AdamState
from .pointcloud import (
    normalize_unit_sphere,
    read_manifest,
    read_ply,
    reference_path,
    resolve,
    synthesize_corpus,
)
from .render import read_view, render_views, write_view
from .train import TrainConfig, load_trained, predict, prepare_items, train_run

log = logging.getLogger("dispa")


def _threads(n):
    return threadpool_limits(limits=n) if n else contextlib.nullcontext()


# -- commands --------------------------------------------------------------


def cmd_synth(args):
    recs = synthesize_corpus(args.out, n_contents=args.contents, n_points=args.points, seed=args.seed)
    print(f"wrote {len(recs)} records to {Path(args.out) / 'manifest.csv'}")


def cmd_render(args):
    pc = normalize_unit_sphere(read_ply(args.input))
    views = render_views(pc, args.views, args.resolution, args.pose_seed, args.radius)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for n, v in enumerate(views):
        write_view(v, out / f"view{n}.png")
    print(f"wrote {len(views)} views to {out}")


def cmd_minipatch(args):
    files = sorted(Path(args.input).glob("*.png"))
    if not files:
        raise SystemExit(f"no PNG views in {args.input}")
    views = [read_view(f) for f in files]
    h, w = views[0].rgb.shape[:2]
    spec = GridSpec(args.L, args.patch, h, w)
    mp = build_map(views, spec, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    from PIL import Image

    Image.fromarray(mp.rgb, mode="RGB").save(out)
    write_provenance(out.with_name("provenance.csv"), mp.provenance)
    print(f"wrote {out} and {out.with_name('provenance.csv')}")


def _load_pairs(manifest):
    records = read_manifest(manifest)
    root = Path(manifest).parent
    refs = {}
    pairs = []
    for r in records:
        if r.content_id not in refs:
            refs[r.content_id] = read_ply(reference_path(root, r.content_id))
        pairs.append((read_ply(resolve(root, r.path)), refs[r.content_id]))
    return pairs


def cmd_pretrain(args):
    base = cfgio.from_mapping(PretrainConfig, cfgio.read_config(args.config)) if args.config else PretrainConfig()
    overrides = {k: v for k, v in dict(
        epochs=args.epochs, batch=args.batch, lr=args.lr, mask_ratio=args.mask_ratio,
        resolution=args.resolution, rotations=args.rotations, radius=args.radius,
    ).items() if v is not None}
    cfg = PretrainConfig(**{**base.__dict__, **overrides, "seed": args.seed})
    out = Path(args.out)
    log_path = args.log or out.with_suffix(".csv")
    res = pretrain(cfg, _load_pairs(args.manifest), checkpoint=out, resume=args.resume,
                   log_path=log_path)
    print(f"final loss {res.epoch_losses[-1]:.6f}; checkpoint {out}; log {log_path}")


def _train_cfg(path, seed):
    mapping = cfgio.read_config(path) if path else {}
    mapping["seed"] = seed
    return cfgio.from_mapping(TrainConfig, mapping)


def _fold_plan(cfg: TrainConfig, content_ids):
    if cfg.protocol == "none":
        ids = sorted(set(content_ids))
        return FoldPlan("none", [Fold(ids, [])])
    return plan_folds(content_ids, cfg.protocol, cfg.seed, cfg.folds, cfg.test_size or None)


def cmd_train(args):
    cfg = _train_cfg(args.config, args.seed)
    F, pcfg = load_content_encoder(args.content_ckpt)
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    if cfg.fold >= 0:
        plan = _fold_plan(cfg, [r.content_id for r in records])
        keep = set(plan.folds[cfg.fold].train)
        records = [r for r in records if r.content_id in keep]
    if not records:
        raise SystemExit("empty manifest")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    items = prepare_items(records, root, F, pcfg, cfg, seed=cfg.seed,
                          cache_dir=args.cache or out.parent / "cache")
    res = train_run(items, F, cfg, checkpoint=out, log_path=out.with_suffix(".csv"), pcfg=pcfg)
    print(f"best epoch {res.best_epoch}; checkpoint {out}")


def cmd_eval(args):
    records = read_manifest(args.manifest)
    root = Path(args.manifest).parent
    fold_cfg = cfgio.read_config(args.folds) if args.folds else {}
    plan = plan_folds([r.content_id for r in records], fold_cfg.get("protocol", "kfold"),
                      fold_cfg.get("seed", args.seed), fold_cfg.get("folds", 5),
                      fold_cfg.get("test_size") or None)
    if len(args.ckpt) not in (1, len(plan)):
        raise SystemExit(f"give one checkpoint or one per fold ({len(plan)})")
    loaded = [load_trained(c) for c in args.ckpt]
    by_key = {}

    def items_for(k):
        k = k if len(loaded) > 1 else 0
        if k not in by_key:
            trainer, pcfg = loaded[k]
            its = prepare_items(records, root, trainer.model.content, pcfg, trainer.cfg,
                                seed=trainer.cfg.seed)
            by_key[k] = ({it.key: it for it in its}, trainer)
        return by_key[k]

    by_content = {}
    for r in records:
        by_content.setdefault(r.content_id, []).append(r)

    def predict_fold(k, recs):
        its, trainer = items_for(k)
        return predict(trainer, [its[r.path] for r in recs])

    report = evaluate_predictions(plan, predict_fold, by_content)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_json(out)
    report.write_csv(out.with_suffix(".csv"))
    m = report.mean
    print(f"SROCC {m['srocc']:.4f}  PLCC {m['plcc']:.4f}  RMSE {m['rmse']:.4f}")


def cmd_mi_bench(args):
    rng = np.random.default_rng(args.seed)
    net = VariationalNetwork(args.dim, seed=args.seed)
    opt = AdamState(lr=args.lr)
    print("step,nll")
    for step in range(args.steps):
        x, y = sample_correlated_gaussian(args.samples, args.dim, args.rho, rng)
        traj = train_estimator(net, RepresentationBatch(x, y), 1, opt)
        if step % args.every == 0 or step == args.steps - 1:
            print(f"{step},{traj[0]!r}")
    x, y = sample_correlated_gaussian(args.samples, args.dim, args.rho, rng)
    est = estimate_mi(net, RepresentationBatch(x, y))
    print("quantity,value")
    print(f"true_mi,{gaussian_mi_oracle(args.rho, args.dim)!r}")
    print(f"estimated_mi,{est.value!r}")


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="dispa", description=__doc__)
    p.add_argument("--seed", type=int, default=0, help="single source of randomness")
    p.add_argument("--threads", type=int, default=0, help="BLAS thread limit (0 = library default)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic distorted corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--contents", type=int, default=8)
    s.add_argument("--points", type=int, default=6000)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("render", help="render a PLY file into view PNGs + masks")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=6)
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--radius", type=int, default=2)
    s.add_argument("--pose-seed", type=int, default=0)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("minipatch", help="build a mini-patch map from rendered views")
    s.add_argument("--input", required=True, help="directory of view PNGs (+ .mask files)")
    s.add_argument("--L", type=int, default=16)
    s.add_argument("--patch", type=int, default=32)
    s.add_argument("--out", required=True, help="map.png; provenance.csv is written alongside")
    s.set_defaults(func=cmd_minipatch)

    s = sub.add_parser("pretrain", help="masked cross-reconstruction pretraining")
    s.add_argument("--manifest", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--resolution", type=int)
    s.add_argument("--rotations", type=int)
    s.add_argument("--radius", type=int)
    s.add_argument("--resume")
    s.add_argument("--log")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train", help="disentangled quality training")
    s.add_argument("--manifest", required=True)
    s.add_argument("--content-ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--cache")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("mi-bench", help="vCLUB on correlated Gaussians")
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--dim", type=int, default=1)
    s.add_argument("--samples", type=int, default=512)
    s.add_argument("--steps", type=int, default=1000)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--every", type=int, default=50)
    s.set_defaults(func=cmd_mi_bench)

    s = sub.add_parser("eval", help="evaluate checkpoints on a fold plan")
    s.add_argument("--ckpt", required=True, action="append",
                   help="stage-2 checkpoint; repeat once per fold for per-fold models")
    s.add_argument("--manifest", required=True)
    s.add_argument("--folds", help="key = value file: protocol, folds, test_size, seed")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    with _threads(args.threads):
        args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
