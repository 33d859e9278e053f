"""Evaluation, timing and comparison routines behind the CLI commands."""

from __future__ import annotations

import time

import numpy as np

from . import distributions as dists
from .models import ScoreModelPair, eval_s1, eval_s2, fd_jacobian_s1_forward
from .training import TrainConfig, train


class OracleScores:
    """Analytic scores of ``dist`` (or of its noisy version when ``sigma`` is set)."""

    def __init__(self, dist, sigma=None):
        self.dist = dist if sigma is None else dists.NoisyDistribution(dist, sigma).exact()
        self.dim = dist.dim

    def s1(self, x):
        return self.dist.scores(x)[1]

    def s2(self, x):
        return self.dist.scores(x)[2]

    def s2diag(self, x):
        return np.diagonal(self.s2(x), axis1=-2, axis2=-1).copy()


class ModelScores:
    def __init__(self, pair: ScoreModelPair):
        self.pair = pair
        self.dim = pair.dim

    def s1(self, x):
        return eval_s1(self.pair.first, x)

    def s2(self, x):
        return eval_s2(self.pair.second, x)

    def s2diag(self, x):
        return eval_s2(self.pair.second, x, full=False)

    @property
    def diag_only(self):
        return self.pair.second.mode == "diag"


def _fd_jacobian(source, x, h=1e-5):
    if isinstance(source, ModelScores):
        return fd_jacobian_s1_forward(source.pair.first, x, h)
    x = np.atleast_2d(x)
    base = source.s1(x)
    d = x.shape[1]
    jac = np.empty((x.shape[0], d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, :, j] = (source.s1(x + e) - base) / h
    return jac


def evaluate(source, dist, n_points=1000, seed=1, target="noisy", sigma=None):
    """Per-entry MSE of s1, direct s2 and the finite-difference Jacobian of s1.

    With ``target="noisy"`` the reference is the exact score of ``dist``
    smoothed at ``sigma``, evaluated at noisy draws; ``"clean"`` compares
    against the unsmoothed density at clean draws.
    """
    if target not in ("noisy", "clean"):
        raise ValueError("target must be 'noisy' or 'clean'")
    if source.dim != dist.dim:
        raise ValueError(f"model dimension {source.dim} != distribution dimension {dist.dim}")
    rng = np.random.default_rng(seed)
    if target == "clean":
        ref, x = dist, dist.sample(n_points, rng)
    else:
        ref = dists.NoisyDistribution(dist, sigma).exact()
        x = ref.sample(n_points, rng)
    _, s1_true, s2_true = ref.scores(x)
    diag = getattr(source, "diag_only", False)
    jac = _fd_jacobian(source, x)
    if diag:
        truth = np.diagonal(s2_true, axis1=1, axis2=2)
        direct = source.s2diag(x)
        fd = np.diagonal(jac, axis1=1, axis2=2)
    else:
        truth, direct, fd = s2_true, source.s2(x), 0.5 * (jac + np.swapaxes(jac, 1, 2))
    return {
        "s1_mse": float(np.mean((source.s1(x) - s1_true) ** 2)),
        "s2_direct_mse": float(np.mean((direct - truth) ** 2)),
        "s2_fd_mse": float(np.mean((fd - truth) ** 2)),
        "diag_only": bool(diag),
        "n_points": n_points,
        "target": target,
    }


def summarize_runs(rows):
    """Mean and std over checkpoints of every MSE column."""
    out = {}
    for key in ("s1_mse", "s2_direct_mse", "s2_fd_mse"):
        v = np.array([r[key] for r in rows])
        out[key] = {"mean": float(v.mean()), "std": float(v.std())}
    return out


def time_call(fn, repeats=7, inner=1, clock=time.perf_counter):
    """Wall-clock seconds per call: list of ``repeats`` measurements."""
    out = []
    for _ in range(repeats):
        t0 = clock()
        for _ in range(inner):
            fn()
        out.append((clock() - t0) / inner)
    return out


def _stats(ts):
    q1, med, q3 = np.percentile(ts, [25, 50, 75])
    return {"median_s": float(med), "iqr_s": float(q3 - q1), "runs": len(ts)}


def bench_pair(pair: ScoreModelPair, batch_size=1, repeats=7, points=20, seed=0):
    """Time direct s2 evaluation against the (D + 1)-pass finite-difference Jacobian of s1.

    Each measurement evaluates ``points`` batches of ``batch_size`` inputs.
    """
    if repeats < 7:
        raise ValueError("need at least 7 timing repeats")
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal((batch_size, pair.dim)) for _ in range(points)]

    def direct():
        for x in xs:
            eval_s2(pair.second, x)

    def via_s1():
        for x in xs:
            fd_jacobian_s1_forward(pair.first, x)

    direct()
    via_s1()
    a = _stats(time_call(direct, repeats))
    b = _stats(time_call(via_s1, repeats))
    return {
        "dim": pair.dim,
        "rank": pair.second.rank,
        "batch_size": batch_size,
        "direct": a,
        "fd_s1": b,
        "ratio": b["median_s"] / a["median_s"],
    }


def bench_dims(dims=(10, 50, 100), rank=20, batch_size=1, repeats=7, points=20, seed=0,
               hidden1=128, hidden2=32):
    rows = []
    for d in dims:
        pair = ScoreModelPair.init(d, 0.1, seed=seed, rank=min(rank, d), hidden1=hidden1, hidden2=hidden2)
        rows.append(bench_pair(pair, batch_size, repeats, points, seed))
    return rows


def diag_vs_fd(dist, cfg: TrainConfig, seeds=(0, 1, 2), n_test=1000, hidden2=32):
    """Train joint-diag models and compare direct diag(s2) with the diagonal of the
    finite-difference Jacobian of the jointly trained s1. Returns per-seed rows."""
    rows = []
    for seed in seeds:
        c = TrainConfig(**{**cfg.__dict__, "seed": seed, "objective": "d2sm-joint-diag"})
        pair = ScoreModelPair.init(dist.dim, c.sigma, seed=seed, mode="diag", hidden2=hidden2)
        pair, _ = train(pair, dist, c)
        row = evaluate(ModelScores(pair), dist, n_test, seed=10_000 + seed, sigma=c.sigma)
        row["seed"] = seed
        rows.append(row)
    return rows
