"""Content-disjoint fold plans, Logistic-4 alignment and SROCC/PLCC/RMSE reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

# -- metrics ---------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ValueError("inputs must have equal length >= 2")
    return a, b


def plcc(a, b):
    a, b = _pair(a, b)
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = float(np.dot(da, da)), float(np.dot(db, db))
    if saa == 0 or sbb == 0:
        raise ValueError("correlation undefined for constant input")
    # one square root keeps identical inputs at exactly 1
    return float(np.clip(np.dot(da, db) / math.sqrt(saa * sbb), -1.0, 1.0))


def srocc(a, b):
    """Spearman correlation: Pearson correlation of average ranks."""
    a, b = _pair(a, b)
    return plcc(rankdata(a), rankdata(b))


def rmse(a, b):
    a, b = _pair(a, b)
    return float(math.sqrt(np.mean((a - b) ** 2)))


# -- Logistic-4 ------------------------------------------------------------


def logistic4(s, beta):
    b1, b2, b3, b4 = beta
    z = np.clip(-(np.asarray(s, dtype=np.float64) - b3) / b4, -700, 700)
    return (b1 - b2) / (1.0 + np.exp(z)) + b2


def _jacobian(s, beta):
    b1, b2, b3, b4 = beta
    z = np.clip(-(s - b3) / b4, -700, 700)
    e = np.exp(z)
    sig = 1.0 / (1.0 + e)
    dsig = sig * (1.0 - sig)  # d sig / d(-z)
    return np.stack(
        [sig, 1.0 - sig, -(b1 - b2) * dsig / b4, -(b1 - b2) * dsig * (s - b3) / (b4 * b4)],
        axis=1,
    )


@dataclass
class Logistic4Fit:
    beta: tuple
    rss: float
    converged: bool
    iterations: int

    def __call__(self, s):
        return logistic4(s, self.beta)


def logistic4_fit(scores, mos, max_iter=200, tol=1e-10) -> Logistic4Fit:
    """Least-squares fit of (b1 - b2) / (1 + exp(-(s - b3) / b4)) + b2.

    Damped Gauss-Newton (Levenberg-Marquardt damping) from
    b1 = max(mos), b2 = min(mos), b3 = median(scores), b4 = std(scores) / 4.
    """
    s, y = _pair(scores, mos)
    if s.size < 5:
        raise ValueError("need at least 5 points")
    if np.ptp(s) == 0:
        raise ValueError("scores are constant")
    beta = np.array([y.max(), y.min(), np.median(s), s.std() / 4.0])
    res = y - logistic4(s, beta)
    rss = float(res @ res)
    damping = 1e-3
    converged = rss == 0.0
    it = 0
    while not converged and it < max_iter:
        it += 1
        J = _jacobian(s, beta)
        JtJ = J.T @ J
        g = J.T @ res
        improved = False
        for _ in range(50):
            A = JtJ + damping * np.diag(np.maximum(np.diag(JtJ), 1e-12))
            try:
                step = np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            cand = beta + step
            if cand[3] == 0 or not np.all(np.isfinite(cand)):
                damping *= 10.0
                continue
            cres = y - logistic4(s, cand)
            crss = float(cres @ cres)
            if crss <= rss:
                rel = (rss - crss) / max(rss, 1e-300)
                beta, res, rss = cand, cres, crss
                damping = max(damping / 10.0, 1e-12)
                improved = True
                if rel < tol or rss == 0.0:
                    converged = True
                break
            damping *= 10.0
        if not improved:
            # no descent direction left: at a (local) minimum
            converged = True
    return Logistic4Fit(tuple(float(b) for b in beta), rss, converged, it)


# -- folds -----------------------------------------------------------------


@dataclass
class Fold:
    train: list
    test: list
    val: list = field(default_factory=list)


@dataclass
class FoldPlan:
    protocol: str
    folds: list

    def __len__(self):
        return len(self.folds)

    def check(self, content_ids=None):
        for k, f in enumerate(self.folds):
            tr, te, va = set(f.train), set(f.test), set(f.val)
            if tr & te or tr & va or te & va:
                raise ValueError(f"fold {k} has overlapping content sets")
        if content_ids is not None and self.protocol == "kfold":
            tested = set().union(*(set(f.test) for f in self.folds))
            missing = set(content_ids) - tested
            if missing:
                raise ValueError(f"contents never tested: {sorted(missing)}")
        return True


def plan_folds(content_ids, protocol="kfold", seed=0, k=5, test_size=None) -> FoldPlan:
    """Split contents into folds with no content shared between train and test.

    ``kfold``: contents are shuffled, fold ``f`` tests the ``test_size``
    contents (default ``ceil(n / k)``) starting at ``f * test_size``, wrapping
    around. ``three-way``: one seeded 8:1:1 train/val/test split.
    """
    ids = sorted(set(content_ids))
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n = len(ids)
    if protocol == "kfold":
        if n < 2:
            raise ValueError("k-fold needs at least two contents")
        if k < 1:
            raise ValueError("k must be >= 1")
        t = test_size or math.ceil(n / k)
        if t >= n:
            raise ValueError("test size leaves no training content")
        if k * t < n:
            raise ValueError(f"{k} folds of {t} cannot cover {n} contents")
        folds = []
        for f in range(k):
            test = [order[(f * t + m) % n] for m in range(t)]
            train = [c for c in order if c not in test]
            folds.append(Fold(train, test))
        plan = FoldPlan("kfold", folds)
    elif protocol in ("three-way", "threeway"):
        if n < 3:
            raise ValueError("three-way split needs at least three contents")
        n_test = max(1, int(math.floor(0.1 * n + 0.5)))
        n_val = max(1, int(math.floor(0.1 * n + 0.5)))
        test = order[:n_test]
        val = order[n_test : n_test + n_val]
        train = order[n_test + n_val :]
        plan = FoldPlan("three-way", [Fold(train, test, val)])
    else:
        raise ValueError(f"unknown protocol {protocol!r}")
    plan.check(ids)
    return plan


# -- reports ---------------------------------------------------------------


@dataclass
class FoldMetrics:
    fold: int
    srocc: float
    plcc: float
    rmse: float
    beta: list
    n_test: int


@dataclass
class MetricsReport:
    protocol: str
    folds: list
    mean: dict

    def to_dict(self):
        return {"protocol": self.protocol, "folds": [asdict(f) for f in self.folds], "mean": self.mean}

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fold", "srocc", "plcc", "rmse", "beta1", "beta2", "beta3", "beta4", "n_test"])
            for f in self.folds:
                w.writerow([f.fold, f.srocc, f.plcc, f.rmse, *f.beta, f.n_test])
            m = self.mean
            w.writerow(["mean", m["srocc"], m["plcc"], m["rmse"], "", "", "", "", ""])


def fold_metrics(fold, predictions, mos) -> FoldMetrics:
    """Raw-score SROCC; PLCC and RMSE after Logistic-4 alignment to MOS."""
    p, y = _pair(predictions, mos)
    fit = logistic4_fit(p, y)
    aligned = fit(p)
    if np.ptp(aligned) == 0 or np.ptp(y) == 0:
        lin = float("nan") if np.ptp(y) else 1.0
    else:
        lin = plcc(aligned, y)
    return FoldMetrics(fold, srocc(p, y), lin, rmse(aligned, y), list(fit.beta), int(p.size))


def evaluate_predictions(plan: FoldPlan, predict_fold, items_by_content) -> MetricsReport:
    """Compute per-fold metrics.

    ``predict_fold(fold_index, items)`` returns predictions for ``items``;
    ``items_by_content`` maps content id -> list of objects with ``.mos``.
    """
    folds = []
    for k, f in enumerate(plan.folds):
        missing = [c for c in f.test if c not in items_by_content]
        if missing:
            raise ValueError(f"fold {k} references unknown contents {missing}")
        items = [it for c in f.test for it in items_by_content[c]]
        preds = np.asarray(predict_fold(k, items), dtype=np.float64)
        folds.append(fold_metrics(k, preds, [it.mos for it in items]))
    mean = {
        key: float(np.mean([getattr(f, key) for f in folds])) for key in ("srocc", "plcc", "rmse")
    }
    return MetricsReport(plan.protocol, folds, mean)
