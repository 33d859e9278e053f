"""Synthetic densities with exact samplers, log-densities and first/second scores.

All evaluation functions are batched: ``x`` of shape ``(N, D)`` (or ``(D,)``)
gives log-density ``(N,)``, first score ``(N, D)`` and Hessian of the
log-density ``(N, D, D)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != dim:
        raise ValueError(f"point dimension {x.shape[-1]} != distribution dimension {dim}")
    return x, single


def _squeeze(single, *arrays):
    if single:
        return tuple(a[0] for a in arrays)
    return arrays


def _check_weights(weights):
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or np.any(w <= 0) or not np.isclose(w.sum(), 1.0, atol=1e-10):
        raise ValueError("mixture weights must be positive and sum to 1")
    return w / w.sum()


class GaussianMixture:
    """Mixture of full-covariance Gaussians; one component gives an MVN.

    Adding isotropic noise keeps the family closed, so :meth:`noisy` returns
    the exact perturbed density.
    """

    kind = "gaussian-mixture"

    def __init__(self, weights, means, covs):
        self.weights = _check_weights(weights)
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        covs = np.asarray(covs, dtype=np.float64)
        if covs.ndim == 2:
            covs = covs[None]
        k, d = self.means.shape
        if covs.shape != (k, d, d) or self.weights.shape != (k,):
            raise ValueError("weights/means/covs disagree on component count or dimension")
        if not np.allclose(covs, np.swapaxes(covs, 1, 2), atol=1e-12):
            raise ValueError("covariances must be symmetric")
        self.covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        self.chols = np.linalg.cholesky(self.covs)  # raises LinAlgError if not PD
        prec = np.linalg.inv(self.covs)
        self.precs = 0.5 * (prec + np.swapaxes(prec, 1, 2))
        logdet = 2.0 * np.log(np.diagonal(self.chols, axis1=1, axis2=2)).sum(axis=1)
        self._log_norm = -0.5 * (d * np.log(2 * np.pi) + logdet)
        self.dim = d

    def noisy(self, sigma: float) -> "GaussianMixture":
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        return GaussianMixture(self.weights, self.means, self.covs + sigma**2 * np.eye(self.dim))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], eps)

    def _components(self, x):
        diff = x[:, None, :] - self.means[None]  # (N, K, D)
        grads = -np.einsum("kij,nkj->nki", self.precs, diff)
        quad = -0.5 * np.einsum("nki,nki->nk", diff, -grads)
        logp = np.log(self.weights) + self._log_norm + quad
        return logp, grads

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        logp, _ = self._components(xb)
        out = logsumexp(logp, axis=1)
        return out[0] if single else out

    def scores(self, x):
        xb, single = _as_batch(x, self.dim)
        logp, grads = self._components(xb)
        lse = logsumexp(logp, axis=1)
        resp = np.exp(logp - lse[:, None])
        s1 = np.einsum("nk,nki->ni", resp, grads)
        second = np.einsum("nki,nkj->nkij", grads, grads) - self.precs[None]
        s2 = np.einsum("nk,nkij->nij", resp, second) - np.einsum("ni,nj->nij", s1, s1)
        s2 = 0.5 * (s2 + np.swapaxes(s2, 1, 2))
        return _squeeze(single, lse, s1, s2)

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }


class LogisticMixture:
    """Mixture of products of independent 1-d logistic densities."""

    kind = "logistic-mixture"

    def __init__(self, weights, locs, scales):
        self.weights = _check_weights(weights)
        self.locs = np.atleast_2d(np.asarray(locs, dtype=np.float64))
        self.scales = np.atleast_2d(np.asarray(scales, dtype=np.float64))
        if self.locs.shape != self.scales.shape or self.locs.shape[0] != len(self.weights):
            raise ValueError("weights/locs/scales disagree on shape")
        if np.any(self.scales <= 0):
            raise ValueError("logistic scales must be positive")
        self.dim = self.locs.shape[1]

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ValueError("n must be >= 1")
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        u = rng.uniform(size=(n, self.dim))
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        return self.locs[comp] + self.scales[comp] * (np.log(u) - np.log1p(-u))

    def _components(self, x):
        u = (x[:, None, :] - self.locs[None]) / self.scales[None]  # (N, K, D)
        per_dim = -u - np.log(self.scales)[None] - 2.0 * np.logaddexp(0.0, -u)
        logp = np.log(self.weights) + per_dim.sum(axis=2)
        t = np.tanh(0.5 * u)
        grads = -t / self.scales[None]
        curv = -(1.0 - t * t) / (2.0 * self.scales[None] ** 2)
        return logp, grads, curv

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        logp, _, _ = self._components(xb)
        out = logsumexp(logp, axis=1)
        return out[0] if single else out

    def scores(self, x):
        xb, single = _as_batch(x, self.dim)
        logp, grads, curv = self._components(xb)
        lse = logsumexp(logp, axis=1)
        resp = np.exp(logp - lse[:, None])
        s1 = np.einsum("nk,nki->ni", resp, grads)
        s2 = np.einsum("nk,nki,nkj->nij", resp, grads, grads) - np.einsum("ni,nj->nij", s1, s1)
        idx = np.arange(self.dim)
        s2[:, idx, idx] += np.einsum("nk,nki->ni", resp, curv)
        s2 = 0.5 * (s2 + np.swapaxes(s2, 1, 2))
        return _squeeze(single, lse, s1, s2)

    def to_config(self) -> dict:
        return {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "locs": self.locs.tolist(),
            "scales": self.scales.tolist(),
        }


class SmoothedLogisticMixture:
    """Logistic mixture convolved with N(0, sigma^2 I).

    Each component stays a product of 1-d factors, and every factor is the
    logistic pdf averaged over Gauss-Hermite nodes.
    """

    kind = "smoothed-logistic-mixture"

    def __init__(self, base: LogisticMixture, sigma: float, nodes: int = 80):
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        self.base = base
        self.sigma = float(sigma)
        self.dim = base.dim
        t, w = np.polynomial.hermite.hermgauss(nodes)
        self._shift = np.sqrt(2.0) * self.sigma * t
        self._logw = np.log(w) - 0.5 * np.log(np.pi)

    def sample(self, n, rng):
        x = self.base.sample(n, rng)
        return x + self.sigma * rng.standard_normal(x.shape)

    def _components(self, x):
        b = self.base
        # (N, K, D, Q) standardized offsets at every quadrature node
        u = (x[:, None, :, None] - self._shift - b.locs[None, :, :, None]) / b.scales[None, :, :, None]
        s = b.scales[None, :, :, None]
        logl = -u - np.log(s) - 2.0 * np.logaddexp(0.0, -u) + self._logw
        logf = logsumexp(logl, axis=3)
        wts = np.exp(logl - logf[..., None])
        t = np.tanh(0.5 * u)
        g = -t / s
        h = (t * t - 0.5 * (1.0 - t * t)) / s**2  # l''/l
        d1 = np.sum(wts * g, axis=3)
        d2 = np.sum(wts * h, axis=3)
        logp = np.log(b.weights) + logf.sum(axis=2)
        return logp, d1, d2 - d1 * d1

    def log_density(self, x):
        xb, single = _as_batch(x, self.dim)
        out = logsumexp(self._components(xb)[0], axis=1)
        return out[0] if single else out

    def scores(self, x):
        xb, single = _as_batch(x, self.dim)
        logp, grads, curv = self._components(xb)
        lse = logsumexp(logp, axis=1)
        resp = np.exp(logp - lse[:, None])
        s1 = np.einsum("nk,nki->ni", resp, grads)
        s2 = np.einsum("nk,nki,nkj->nij", resp, grads, grads) - np.einsum("ni,nj->nij", s1, s1)
        idx = np.arange(self.dim)
        s2[:, idx, idx] += np.einsum("nk,nki->ni", resp, curv)
        s2 = 0.5 * (s2 + np.swapaxes(s2, 1, 2))
        return _squeeze(single, lse, s1, s2)


@dataclass
class NoisyDistribution:
    """Base density convolved with N(0, sigma^2 I)."""

    base: GaussianMixture | LogisticMixture
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def dim(self):
        return self.base.dim

    def exact(self):
        """Gaussian bases in closed form; logistic bases by per-dimension quadrature."""
        if isinstance(self.base, LogisticMixture):
            return SmoothedLogisticMixture(self.base, self.sigma)
        if not isinstance(self.base, GaussianMixture):
            raise NotImplementedError(f"no exact form for noisy {self.base.kind}")
        return self.base.noisy(self.sigma)

    def sample(self, n, rng):
        x = self.base.sample(n, rng)
        return x + self.sigma * rng.standard_normal(x.shape)

    def scores(self, x):
        return self.exact().scores(x)


# -- constructors -------------------------------------------------------------


def multivariate_normal(mean, cov) -> GaussianMixture:
    mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
    return GaussianMixture([1.0], mean[None], np.asarray(cov, dtype=np.float64)[None])


def standard_normal(dim: int) -> GaussianMixture:
    return multivariate_normal(np.zeros(dim), np.eye(dim))


def two_mode_gaussian(mu1, mu2, cov) -> GaussianMixture:
    cov = np.asarray(cov, dtype=np.float64)
    return GaussianMixture([0.5, 0.5], [mu1, mu2], np.stack([cov, cov]))


def ring(n_modes=8, radius=2.0, std=0.2) -> GaussianMixture:
    """Isotropic Gaussian bumps evenly spaced on a circle."""
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    means = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    covs = np.repeat((std**2 * np.eye(2))[None], n_modes, axis=0)
    return GaussianMixture(np.full(n_modes, 1.0 / n_modes), means, covs)


def checker(cells=4, width=1.0, std=0.15) -> GaussianMixture:
    """Bumps centred on the dark squares of a ``cells x cells`` board."""
    centres = [
        ((i - (cells - 1) / 2) * width, (j - (cells - 1) / 2) * width)
        for i in range(cells)
        for j in range(cells)
        if (i + j) % 2 == 0
    ]
    k = len(centres)
    covs = np.repeat((std**2 * np.eye(2))[None], k, axis=0)
    return GaussianMixture(np.full(k, 1.0 / k), centres, covs)


def random_spd(dim: int, rng: np.random.Generator, cond: float = 100.0) -> np.ndarray:
    """Random rotation of a log-spaced spectrum in [1/cond, 1]."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    q = q * np.sign(np.diag(r))
    eig = np.logspace(0.0, -np.log10(cond), dim) if dim > 1 else np.ones(1)
    m = (q * eig) @ q.T
    return 0.5 * (m + m.T)


def correlated_normal(dim: int, seed: int, cond: float = 100.0) -> GaussianMixture:
    rng = np.random.default_rng(seed)
    return multivariate_normal(rng.normal(size=dim), random_spd(dim, rng, cond))


def random_logistic_mixture(dim: int, n_components: int, seed: int,
                            loc_scale=2.0, scale_range=(0.5, 1.0)) -> LogisticMixture:
    rng = np.random.default_rng(seed)
    w = rng.uniform(0.5, 1.5, size=n_components)
    locs = rng.normal(scale=loc_scale, size=(n_components, dim))
    scales = rng.uniform(*scale_range, size=(n_components, dim))
    return LogisticMixture(w / w.sum(), locs, scales)


# -- operations -----------------------------------------------------------------


def sample(dist, n: int, seed) -> np.ndarray:
    return dist.sample(n, np.random.default_rng(seed))


def perturb(x, sigma: float, rng: np.random.Generator | None = None, z=None):
    """Return ``(x + sigma z, z)`` with ``z ~ N(0, I)`` unless ``z`` is given."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=np.float64)
    if z is None:
        z = rng.standard_normal(x.shape)
    z = np.asarray(z, dtype=np.float64)
    return x + sigma * z, z


def analytic_scores(dist, x):
    """``(log_density, s1, s2)`` in closed form."""
    return dist.scores(x)


def from_config(cfg: dict):
    """Build a distribution from a config section (see README for keys)."""
    kind = cfg["kind"]
    dim = int(cfg.get("dim", 2))
    seed = int(cfg.get("seed", 0))
    if kind == "standard-normal":
        return standard_normal(dim)
    if kind == "multivariate-normal":
        if "mean" in cfg:
            return multivariate_normal(_vec(cfg["mean"]), _mat(cfg["cov"], dim))
        return correlated_normal(dim, seed, float(cfg.get("cond", 100.0)))
    if kind == "two-mode-gaussian":
        mu1 = _vec(cfg.get("mu1", "3 0"))
        mu2 = _vec(cfg.get("mu2", "-3 0"))
        var = float(cfg.get("var", 1.0))
        return two_mode_gaussian(mu1, mu2, var * np.eye(len(mu1)))
    if kind == "logistic-mixture":
        return random_logistic_mixture(
            dim, int(cfg.get("components", 20)), seed,
            float(cfg.get("loc_scale", 2.0)),
            (float(cfg.get("scale_min", 0.5)), float(cfg.get("scale_max", 1.0))),
        )
    if kind == "ring":
        return ring(int(cfg.get("modes", 8)), float(cfg.get("radius", 2.0)), float(cfg.get("std", 0.2)))
    if kind == "checker":
        return checker(int(cfg.get("cells", 4)), float(cfg.get("width", 1.0)), float(cfg.get("std", 0.15)))
    raise ValueError(f"unknown distribution kind {kind!r}")


def _vec(s):
    if isinstance(s, str):
        return np.array([float(t) for t in s.replace(",", " ").split()])
    return np.asarray(s, dtype=np.float64)


def _mat(s, dim):
    v = _vec(s)
    if v.size == dim:
        return np.diag(v)
    return v.reshape(dim, dim)


def write_dataset_csv(path, x: np.ndarray) -> None:
    x = np.atleast_2d(x)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(x.shape[1])])
        for row in x:
            w.writerow([repr(float(v)) for v in row])


def read_dataset_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return np.zeros((0, 0))
    dim = len(rows[0])
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim:
            raise ValueError(f"{path}:{lineno}: expected {dim} values, got {len(row)}")
        try:
            out.append([float(v) for v in row])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return np.array(out, dtype=np.float64).reshape(-1, dim)
