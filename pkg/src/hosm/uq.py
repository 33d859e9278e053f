"""Denoising posterior summaries from first- and second-order scores."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .models import ScoreModelPair, check_sigma, eval_s1, eval_s2
from .objectives import posterior_cov, tweedie_mean

logger = logging.getLogger(__name__)

EIGH_WARN_DIM = 512


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    cov: np.ndarray
    diag: np.ndarray
    top_eigen: list  # [(eigenvalue, eigenvector)], descending
    raw_spectrum: np.ndarray  # eigenvalues before clipping, descending

    def to_dict(self, k=None):
        pairs = self.top_eigen if k is None else self.top_eigen[:k]
        return {
            "mean": self.mean.tolist(),
            "diag": self.diag.tolist(),
            "eigenvalues": [float(v) for v, _ in pairs],
            "eigenvectors": [vec.tolist() for _, vec in pairs],
            "spectrum_pre_projection": self.raw_spectrum.tolist(),
            "spectrum_post_projection": [float(v) for v, _ in self.top_eigen],
        }


def _eigh_desc(mat):
    if mat.shape[0] > EIGH_WARN_DIM:
        logger.warning("dense eigendecomposition of a %dx%d matrix", *mat.shape)
    vals, vecs = np.linalg.eigh(mat)
    order = np.argsort(vals)[::-1]
    return vals[order], vecs[:, order]


def eigvecs_topk(cov, k):
    """Top-k ``(eigenvalue, unit eigenvector)`` pairs of a symmetric matrix."""
    cov = np.asarray(cov, dtype=np.float64)
    if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-8:
        raise ValueError("matrix is not symmetric")
    if not 1 <= k <= cov.shape[0]:
        raise ValueError(f"k must be in [1, {cov.shape[0]}]")
    vals, vecs = _eigh_desc(0.5 * (cov + cov.T))
    return [(float(vals[i]), vecs[:, i].copy()) for i in range(k)]


def project_psd(cov):
    """Symmetrize, clip negative eigenvalues at zero. Returns ``(projected, raw_eigenvalues_desc)``."""
    sym = 0.5 * (cov + cov.T)
    vals, vecs = _eigh_desc(sym)
    clipped = np.clip(vals, 0.0, None)
    proj = (vecs * clipped) @ vecs.T
    return 0.5 * (proj + proj.T), vals


def summarize(mean, cov) -> PosteriorSummary:
    proj, raw = project_psd(np.asarray(cov, dtype=np.float64))
    if raw[-1] < 0:
        logger.debug("clipped covariance spectrum, min eigenvalue %.3e", raw[-1])
    vals, vecs = _eigh_desc(proj)
    vals = np.clip(vals, 0.0, None)
    top = [(float(vals[i]), vecs[:, i].copy()) for i in range(len(vals))]
    return PosteriorSummary(np.asarray(mean, dtype=np.float64), proj, np.diag(proj).copy(), top, raw)


def denoise_from_scores(s1, s2, x_noisy, sigma) -> PosteriorSummary:
    """Gaussian approximation of p(x | x~) from noisy-density scores at one point."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(s2))):
        raise FloatingPointError("non-finite score values")
    return summarize(tweedie_mean(s1, x_noisy, sigma), posterior_cov(s1, s2, x_noisy, sigma))


def denoise_with_uq(pair: ScoreModelPair, x_noisy, sigma) -> PosteriorSummary:
    check_sigma(pair, sigma)
    x = np.asarray(x_noisy, dtype=np.float64)
    return denoise_from_scores(eval_s1(pair.first, x), eval_s2(pair.second, x), x, sigma)


def gaussian_posterior_sample(summary: PosteriorSummary, n, seed):
    """Draws from N(mean, cov) using the eigen square root of the projected covariance."""
    rng = np.random.default_rng(seed)
    d = summary.mean.shape[0]
    vals = np.array([v for v, _ in summary.top_eigen])
    vecs = np.stack([u for _, u in summary.top_eigen], axis=1) if d else np.zeros((0, 0))
    z = rng.standard_normal((n, d))
    return summary.mean + (z * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def write_report(path, summaries, k=None, samples=None):
    points = []
    for i, s in enumerate(summaries):
        entry = s.to_dict(k)
        if samples is not None:
            entry["samples"] = np.asarray(samples[i]).tolist()
        points.append(entry)
    with open(path, "w") as fh:
        json.dump({"points": points}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path):
    with open(path) as fh:
        return json.load(fh)["points"]
