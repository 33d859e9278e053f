"""``hosm`` command-line entry point.

Exit codes: 0 success, 1 invalid config or input, 2 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

from . import distributions as dists
from . import experiments as ex
from . import samplers
from . import uq
from .config import ConfigError, ExperimentConfig, load_config, require_file
from .errors import DivergenceError
from .models import ScoreModelPair, check_sigma
from .training import train

log = logging.getLogger("hosm")

COMMANDS = ("train", "eval", "bench", "sample", "denoise")
EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


def _load_pair(path, dist) -> ScoreModelPair:
    pair = ScoreModelPair.load(require_file(path, "checkpoint"))
    if pair.dim != dist.dim:
        raise ConfigError(f"checkpoint dimension {pair.dim} != distribution dimension {dist.dim}")
    return pair


def cmd_train(cfg: ExperimentConfig, dist):
    m = cfg.model
    pair = ScoreModelPair.init(dist.dim, cfg.train.sigma, seed=cfg.train.seed, rank=m.rank,
                               mode="diag" if cfg.train.diag else m.mode,
                               hidden1=m.hidden1, hidden2=m.hidden2, depth=m.depth)
    ckpt = os.path.join(cfg.out_dir, "checkpoint.hosm")
    meta = {"objective": cfg.train.objective, "seed": cfg.train.seed, "steps": cfg.train.steps}
    try:
        pair, reports = train(pair, dist, cfg.train, log_every=cfg.log_every,
                              log_path=os.path.join(cfg.out_dir, "train_log.csv"))
    except DivergenceError as exc:
        exc.state.save(os.path.join(cfg.out_dir, "checkpoint_last_good.hosm"), meta)
        raise
    pair.save(ckpt, meta)
    errs = ex.evaluate(ex.ModelScores(pair), dist, cfg.eval.test_points, cfg.eval.seed,
                       "noisy", cfg.train.sigma)
    summary = {
        "checkpoint": os.path.basename(ckpt),
        "final": reports[-1].__dict__ if reports else None,
        "s1_mse": errs["s1_mse"],
        "s2_mse": errs["s2_direct_mse"],
    }
    _write_json(os.path.join(cfg.out_dir, "train_summary.json"), summary)
    return summary


def _sources(cfg: ExperimentConfig, dist):
    """(name, score source, sigma) for every model the config points at."""
    if cfg.source == "oracle":
        sigma = cfg.train.sigma
        return [("oracle", ex.OracleScores(dist, sigma), sigma)]
    paths = ([cfg.checkpoint] if cfg.checkpoint else []) + cfg.eval.checkpoints
    if not paths:
        raise ConfigError("no checkpoint given ([experiment] checkpoint or [eval] checkpoints)")
    out = []
    for p in paths:
        pair = _load_pair(p, dist)
        out.append((os.path.basename(p), ex.ModelScores(pair), pair.sigma_train))
    return out


def cmd_eval(cfg: ExperimentConfig, dist):
    e = cfg.eval
    rows = []
    timings = []
    for name, src, sigma in _sources(cfg, dist):
        row = ex.evaluate(src, dist, e.test_points, e.seed, e.target, sigma)
        row["name"] = name
        rows.append(row)
        if isinstance(src, ex.ModelScores) and not src.diag_only:
            t = ex.bench_pair(src.pair, 1, e.repeats, seed=e.seed)
            timings.append({"name": name, **t})
    report = {"per_checkpoint": rows, "summary": ex.summarize_runs(rows)}
    if cfg.format == "json":
        _write_json(os.path.join(cfg.out_dir, "eval.json"), report)
    else:
        keys = ["name", "s1_mse", "s2_direct_mse", "s2_fd_mse", "diag_only", "n_points", "target"]
        _write_rows(os.path.join(cfg.out_dir, "eval.csv"), keys, [[r[k] for k in keys] for r in rows])
    # wall-clock numbers go to their own file so the error report stays reproducible
    if timings:
        _write_timings(cfg, "eval_timing", timings)
    return report


def _write_timings(cfg, stem, rows):
    if cfg.format == "json":
        _write_json(os.path.join(cfg.out_dir, stem + ".json"), {"rows": rows})
        return
    header = ["name", "dim", "rank", "batch_size", "direct_median_s", "direct_iqr_s",
              "fd_median_s", "fd_iqr_s", "runs", "ratio"]
    flat = [[r.get("name", ""), r["dim"], r["rank"], r["batch_size"], r["direct"]["median_s"],
             r["direct"]["iqr_s"], r["fd_s1"]["median_s"], r["fd_s1"]["iqr_s"],
             r["direct"]["runs"], r["ratio"]] for r in rows]
    _write_rows(os.path.join(cfg.out_dir, stem + ".csv"), header, flat)


def cmd_bench(cfg: ExperimentConfig, dist):
    b = cfg.bench
    if cfg.checkpoint:
        pair = _load_pair(cfg.checkpoint, dist)
        rows = [{"name": os.path.basename(cfg.checkpoint),
                 **ex.bench_pair(pair, b.batch_size, b.repeats, b.points, b.seed)}]
    else:
        rows = [{"name": f"D={r['dim']}", **r} for r in ex.bench_dims(
            b.dims, b.rank, b.batch_size, b.repeats, b.points, b.seed,
            cfg.model.hidden1, cfg.model.hidden2)]
    _write_timings(cfg, "bench", rows)
    return rows


def cmd_sample(cfg: ExperimentConfig, dist):
    sc = cfg.sampler
    if cfg.source == "oracle":
        src = ex.OracleScores(dist)
    else:
        src = ex.ModelScores(_load_pair(require_file(cfg.checkpoint, "checkpoint"), dist))
    s2diag = src.s2diag if sc.method == "ozaki-diag" else None
    data = None
    if sc.init == "data-sample":
        data = dists.sample(dist, max(1000, sc.chains), sc.seed)
    try:
        state, ess = samplers.run_chains(sc, src.s1, s2diag, dim=dist.dim, data=data)
    except DivergenceError as exc:
        last = None if exc.state is None else np.asarray(exc.state).tolist()
        _write_json(os.path.join(cfg.out_dir, "divergence.json"),
                    {"message": str(exc), "step": exc.step, "last_state": last})
        raise
    samplers.write_trajectory_csv(os.path.join(cfg.out_dir, "trajectories.csv"), state.history, sc.burn_in)
    rep = json.loads(ess.to_json())
    flat = state.history.reshape(-1, dist.dim)
    rep.update({
        "clamped": int(state.clamped),
        "method": sc.method,
        "step_size": sc.step_size,
        "mean": flat.mean(axis=0).tolist(),
        "var": flat.var(axis=0).tolist(),
    })
    _write_json(os.path.join(cfg.out_dir, "ess.json"), rep)
    return rep


def cmd_denoise(cfg: ExperimentConfig, dist):
    d = cfg.denoise
    points = dists.read_dataset_csv(require_file(d.input, "denoise input"))
    if cfg.source == "oracle":
        sigma = d.sigma if d.sigma is not None else cfg.train.sigma
        src = ex.OracleScores(dist, sigma)
    else:
        pair = _load_pair(cfg.checkpoint, dist)
        sigma = d.sigma if d.sigma is not None else pair.sigma_train
        check_sigma(pair, sigma)
        src = ex.ModelScores(pair)
    if points.size and points.shape[1] != dist.dim:
        raise ConfigError(f"input points have dimension {points.shape[1]}, expected {dist.dim}")
    summaries = []
    draws = [] if d.samples else None
    for i, x in enumerate(points):
        s = uq.denoise_from_scores(src.s1(x), src.s2(x), x, sigma)
        summaries.append(s)
        if d.samples:
            draws.append(uq.gaussian_posterior_sample(s, d.samples, [d.seed, i]))
    uq.write_report(os.path.join(cfg.out_dir, "denoise.json"), summaries, d.top_k, draws)
    return summaries


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "sample": cmd_sample, "denoise": cmd_denoise}


def build_parser():
    p = argparse.ArgumentParser(prog="hosm", description="Higher-order score models: train, evaluate, sample, denoise.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="INI experiment config")
    p.add_argument("--out", default=None, help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, default=None, help="seed for every stochastic stage")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        dist = dists.from_config(cfg.distribution)
        os.makedirs(cfg.out_dir, exist_ok=True)
        HANDLERS[args.command](cfg, dist)
    except DivergenceError as exc:
        print(f"hosm {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"hosm {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
