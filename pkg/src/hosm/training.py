"""Adam training loop for score-model pairs."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError
from .models import ScoreModelPair, eval_s1, eval_s2
from .objectives import LossReport, joint_loss_tape

OBJECTIVES = ("dsm", "d2sm-joint", "d2sm-joint-diag")
LOG_HEADER = ["step", "total", "dsm", "d2sm", "grad_norm", "wall_time"]


@dataclass
class TrainConfig:
    sigma: float = 0.1
    gamma: float = 1.0
    batch_size: int = 128
    steps: int = 5000
    lr: float = 1e-3
    seed: int = 0
    variance_reduction: bool = False
    objective: str = "d2sm-joint"
    detach_s1: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")

    @property
    def diag(self):
        return self.objective == "d2sm-joint-diag"


def train(pair: ScoreModelPair, dist, cfg: TrainConfig, log_every=0, log_path=None,
          callback=None, clock=time.perf_counter):
    """Train ``pair`` on fresh draws from ``dist``. Returns ``(pair, reports)``.

    ``reports`` holds one :class:`LossReport` per logged step (every
    ``log_every`` steps plus the first and last). ``callback(step, pair)`` is
    called at the same points. A non-finite loss raises :class:`DivergenceError`
    carrying the last finite parameters.
    """
    rng = np.random.default_rng(cfg.seed)
    objective = "dsm" if cfg.objective == "dsm" else "joint"
    arrays = pair.arrays()
    state = ad.AdamState.fresh(arrays, lr=cfg.lr)
    reports = []
    t0 = clock()
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
    try:
        for step in range(1, cfg.steps + 1):
            x = dist.sample(cfg.batch_size, rng)
            z = rng.standard_normal(x.shape)
            leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
            named = _split(pair, leaves)
            total, dsm, d2sm = joint_loss_tape(
                pair, named, x, z, cfg.sigma, cfg.gamma, cfg.diag, cfg.variance_reduction, objective,
                cfg.detach_s1,
            )
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at step {step}", step, pair.with_arrays(arrays))
            grads = ad.backward(total, leaves)
            arrays = ad.adam_step(arrays, grads, state)
            if log_every and (step % log_every == 0 or step == 1 or step == cfg.steps):
                gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
                rep = LossReport(
                    float(total.data),
                    float(dsm.data),
                    float("nan") if d2sm is None else float(d2sm.data),
                    gnorm,
                    step,
                )
                reports.append(rep)
                if writer is not None:
                    writer.writerow([step, repr(rep.total), repr(rep.dsm), repr(rep.d2sm),
                                     repr(rep.grad_norm), f"{clock() - t0:.6f}"])
                if callback is not None:
                    callback(step, pair.with_arrays(arrays))
    finally:
        if fh is not None:
            fh.close()
    return pair.with_arrays(arrays), reports


def _split(pair, leaves):
    out = {}
    pos = 0
    for name, net in pair.networks().items():
        n = len(net.arrays())
        out[name] = leaves[pos : pos + n]
        pos += n
    return out


def score_errors(pair: ScoreModelPair, target, x_test, diag=False):
    """Per-entry mean squared error of the learned s1 and s2 against ``target.scores``.

    On a fixed test set these track training progress without the
    irreducible noise constant that dominates the raw minibatch losses.
    """
    _, s1_true, s2_true = target.scores(x_test)
    s1 = eval_s1(pair.first, x_test)
    s1_mse = float(np.mean((s1 - s1_true) ** 2))
    if diag or pair.second.mode == "diag":
        s2 = eval_s2(pair.second, x_test, full=False)
        s2_mse = float(np.mean((s2 - np.diagonal(s2_true, axis1=1, axis2=2)) ** 2))
    else:
        s2_mse = float(np.mean((eval_s2(pair.second, x_test) - s2_true) ** 2))
    return s1_mse, s2_mse
