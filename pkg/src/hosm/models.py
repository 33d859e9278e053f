"""First-order score network and the diagonal-plus-low-rank second-order head."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import MlpParams, ShapeError


@dataclass
class FirstOrderModel:
    net: MlpParams

    def __post_init__(self):
        if self.net.in_dim != self.net.out_dim:
            raise ShapeError("first-order model must map R^D to R^D")

    @property
    def dim(self):
        return self.net.in_dim

    @classmethod
    def init(cls, dim, rng, hidden=128, depth=3, zero=False):
        sizes = [dim] + [hidden] * (depth - 1) + [dim]
        return cls(MlpParams.init(sizes, rng, zero=zero))


@dataclass
class SecondOrderModel:
    """s2(x) = diag(alpha(x)) + beta(x) beta(x)^T, or only alpha in diag mode."""

    alpha_net: MlpParams
    beta_net: MlpParams | None
    rank: int
    mode: str = "full"

    def __post_init__(self):
        d = self.alpha_net.in_dim
        if self.mode not in ("full", "diag"):
            raise ValueError(f"mode must be 'full' or 'diag', got {self.mode!r}")
        if self.alpha_net.out_dim != d:
            raise ShapeError("alpha net must output D values")
        if self.mode == "full":
            if self.beta_net is None or not 1 <= self.rank <= d:
                raise ValueError("full mode needs a beta net and 1 <= rank <= D")
            if self.beta_net.in_dim != d or self.beta_net.out_dim != d * self.rank:
                raise ShapeError("beta net must map R^D to R^(D*r)")
        elif self.beta_net is not None:
            raise ValueError("diag mode carries no beta net")

    @property
    def dim(self):
        return self.alpha_net.in_dim

    @classmethod
    def init(cls, dim, rng, rank=None, hidden=32, depth=3, mode="full", zero=False):
        rank = min(20, dim) if rank is None else rank
        sizes = [dim] + [hidden] * (depth - 1)
        alpha = MlpParams.init(sizes + [dim], rng, zero=zero)
        beta = MlpParams.init(sizes + [dim * rank], rng, zero=zero) if mode == "full" else None
        return cls(alpha, beta, rank, mode)


@dataclass
class ScoreModelPair:
    first: FirstOrderModel
    second: SecondOrderModel
    sigma_train: float

    def __post_init__(self):
        if self.first.dim != self.second.dim:
            raise ShapeError("first- and second-order models disagree on D")

    @property
    def dim(self):
        return self.first.dim

    @classmethod
    def init(cls, dim, sigma, seed=0, rank=None, mode="full", hidden1=128, hidden2=32, depth=3):
        rng = np.random.default_rng(seed)
        first = FirstOrderModel.init(dim, rng, hidden=hidden1, depth=depth)
        second = SecondOrderModel.init(dim, rng, rank=rank, hidden=hidden2, depth=depth, mode=mode)
        return cls(first, second, sigma)

    def networks(self) -> dict[str, MlpParams]:
        nets = {"s1": self.first.net, "alpha": self.second.alpha_net}
        if self.second.beta_net is not None:
            nets["beta"] = self.second.beta_net
        return nets

    def arrays(self) -> list[np.ndarray]:
        out = []
        for net in self.networks().values():
            out += net.arrays()
        return out

    def with_arrays(self, arrays) -> "ScoreModelPair":
        nets = {}
        pos = 0
        for name, net in self.networks().items():
            n = len(net.arrays())
            nets[name] = net.with_arrays(arrays[pos : pos + n])
            pos += n
        second = SecondOrderModel(nets["alpha"], nets.get("beta"), self.second.rank, self.second.mode)
        return ScoreModelPair(FirstOrderModel(nets["s1"]), second, self.sigma_train)

    def save(self, path, extra=None):
        meta = {
            "rank": self.second.rank,
            "mode": self.second.mode,
            "sigma_train": self.sigma_train,
            "dim": self.dim,
        }
        meta.update(extra or {})
        ad.save_checkpoint(path, self.networks(), meta)

    @classmethod
    def load(cls, path) -> "ScoreModelPair":
        nets, meta = ad.load_checkpoint(path)
        second = SecondOrderModel(nets["alpha"], nets.get("beta"), int(meta["rank"]), meta["mode"])
        return cls(FirstOrderModel(nets["s1"]), second, float(meta["sigma_train"]))


# -- numpy evaluation -----------------------------------------------------------


def eval_s1(model: FirstOrderModel, x):
    """First-order score at ``x`` of shape ``(D,)`` or ``(B, D)``."""
    return ad.mlp_forward(model.net, x)


def eval_alpha_beta(model: SecondOrderModel, x):
    x = np.asarray(x, dtype=np.float64)
    alpha = ad.mlp_forward(model.alpha_net, x)
    if model.beta_net is None:
        return alpha, None
    beta = ad.mlp_forward(model.beta_net, x)
    return alpha, beta.reshape(beta.shape[:-1] + (model.dim, model.rank))


def eval_s2(model: SecondOrderModel, x, full=True):
    """Full ``(.., D, D)`` Hessian estimate, or the alpha vector in diag mode.

    Requesting ``full=True`` from a diag-only model raises ``ValueError``.
    """
    alpha, beta = eval_alpha_beta(model, x)
    if model.mode == "diag":
        if full:
            raise ValueError("diag-only model cannot produce a full s2 matrix")
        return alpha
    if not full:
        return alpha + np.sum(beta * beta, axis=-1)
    # B @ B^T dispatches to a symmetric rank-k BLAS update, so the result is exactly symmetric
    out = beta @ np.swapaxes(beta, -1, -2)
    idx = np.arange(model.dim)
    out[..., idx, idx] += alpha
    return out


def eval_s2_diag(model: SecondOrderModel, x):
    """Diagonal of the second-order estimate (works in both modes)."""
    return eval_s2(model, x, full=False)


def fd_jacobian_s1(model: FirstOrderModel, x, h=1e-4):
    """Central-difference Jacobian of s1 over a batch: 2D forward passes."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    jac = np.empty((x.shape[0], d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, :, j] = (eval_s1(model, x + e) - eval_s1(model, x - e)) / (2 * h)
    return jac


def fd_jacobian_s1_forward(model: FirstOrderModel, x, h=1e-5):
    """One-sided Jacobian of s1: D + 1 forward passes over the batch."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    d = x.shape[1]
    base = eval_s1(model, x)
    jac = np.empty((x.shape[0], d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, :, j] = (eval_s1(model, x + e) - base) / h
    return jac


def check_sigma(pair: ScoreModelPair, sigma: float):
    if not np.isclose(sigma, pair.sigma_train, rtol=1e-9):
        warnings.warn(
            f"model trained at sigma={pair.sigma_train}, evaluated at sigma={sigma}",
            stacklevel=3,
        )


# -- taped evaluation (for training) -----------------------------------------------


def pair_leaves(pair: ScoreModelPair) -> dict[str, list[ad.Tensor]]:
    return {name: ad.leaves_of(net) for name, net in pair.networks().items()}


def taped_scores(pair: ScoreModelPair, leaves, x, need_second=True):
    """Taped ``(s1, alpha, beta)`` at a batch ``x`` (B, D); beta is None in diag mode."""
    s1 = ad.mlp_forward_tape(leaves["s1"], x)
    if not need_second:
        return s1, None, None
    alpha = ad.mlp_forward_tape(leaves["alpha"], x)
    beta = None
    if "beta" in leaves:
        b = ad.mlp_forward_tape(leaves["beta"], x)
        beta = ad.reshape(b, (b.shape[0], pair.dim, pair.second.rank))
    return s1, alpha, beta
