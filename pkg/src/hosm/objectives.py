"""Denoising score-matching losses and Tweedie moment formulas.

The ``*_term`` functions work on taped score values so that exact
"cheating" score sources can be plugged in directly; the ``loss_*``
wrappers evaluate a model on a batch and return ``(value, grads)`` with
grads aligned to the model's parameter arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import FirstOrderModel, ScoreModelPair, pair_leaves, taped_scores


def _check_sigma(sigma):
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")


# -- loss terms on taped values ---------------------------------------------------


def dsm_term(s1: Tensor, z, sigma) -> Tensor:
    """mean_b 1/2 ||s1(x~) + z / sigma||^2"""
    _check_sigma(sigma)
    r = ad.add(s1, np.asarray(z) / sigma)
    return ad.scale(ad.mean(ad.tsum(ad.square(r), axis=1)), 0.5)


def dsm_vr_term(s1_noisy: Tensor, s1_clean: Tensor, z, sigma) -> Tensor:
    """DSM with the first-order control variate subtracted.

    Per sample: 1/2||s1(x~)||^2 + (s1(x~) - s1(x))^T z / sigma + D / (2 sigma^2);
    the z-only terms cancel analytically, which keeps the value finite as sigma -> 0.
    """
    _check_sigma(sigma)
    z = np.asarray(z)
    d = z.shape[1]
    quad = ad.scale(ad.tsum(ad.square(s1_noisy), axis=1), 0.5)
    cross = ad.scale(ad.tsum(ad.mul(ad.add(s1_noisy, ad.scale(s1_clean, -1.0)), z), axis=1), 1.0 / sigma)
    return ad.add(ad.mean(ad.add(quad, cross)), d / (2.0 * sigma**2))


def psi_full(s1: Tensor, alpha: Tensor, beta: Tensor | None) -> Tensor:
    """s2 + s1 s1^T as a (B, D, D) tensor, with s2 = diag(alpha) + beta beta^T."""
    b, d = s1.shape
    col = ad.reshape(s1, (b, d, 1))
    out = ad.matmul(col, ad.transpose(col))
    out = ad.add(out, ad.mul(ad.reshape(alpha, (b, d, 1)), np.eye(d)))
    if beta is not None:
        out = ad.add(out, ad.matmul(beta, ad.transpose(beta)))
    return out


def psi_diag(s1: Tensor, alpha: Tensor, beta: Tensor | None) -> Tensor:
    """diag(s2) + s1 * s1 as a (B, D) tensor."""
    out = ad.add(alpha, ad.square(s1))
    if beta is not None:
        out = ad.add(out, ad.tsum(ad.square(beta), axis=2))
    return out


def _noise_target(z, sigma, diag):
    z = np.asarray(z)
    if diag:
        return (1.0 - z * z) / sigma**2
    d = z.shape[1]
    return (np.eye(d)[None] - z[:, :, None] * z[:, None, :]) / sigma**2


def _sum_per_sample(t: Tensor) -> Tensor:
    flat = ad.reshape(t, (t.shape[0], -1))
    return ad.tsum(flat, axis=1)


def d2sm_term(psi: Tensor, z, sigma, diag=False) -> Tensor:
    """mean_b ||psi(x~) + (I - z z^T) / sigma^2||^2 (squared Frobenius; diagonal when ``diag``)."""
    _check_sigma(sigma)
    r = ad.add(psi, _noise_target(z, sigma, diag))
    return ad.mean(_sum_per_sample(ad.square(r)))


def d2sm_vr_term(psi_plus: Tensor, psi_minus: Tensor, psi_center: Tensor, z, sigma, diag=False) -> Tensor:
    """Antithetic second-order loss.

    Per sample: psi(x+)^2 + psi(x-)^2 + 2 (I - z z^T)/sigma^2 * (psi(x+) + psi(x-) - 2 psi(x)),
    summed over entries. Its expectation is twice the plain loss minus a constant.
    """
    _check_sigma(sigma)
    w = 2.0 * _noise_target(z, sigma, diag)
    second_diff = ad.add(ad.add(psi_plus, psi_minus), ad.scale(psi_center, -2.0))
    per = ad.add(ad.add(ad.square(psi_plus), ad.square(psi_minus)), ad.mul(second_diff, w))
    return ad.mean(_sum_per_sample(per))


# -- model-level losses -------------------------------------------------------------


@dataclass
class LossReport:
    total: float
    dsm: float
    d2sm: float
    grad_norm: float = float("nan")
    step: int = 0


def _flatten(leaves: dict) -> list[Tensor]:
    out = []
    for v in leaves.values():
        out += v
    return out


def loss_dsm(model: FirstOrderModel, x, z, sigma):
    """Plain DSM on x~ = x + sigma z. Returns ``(value, grads)``."""
    leaves = ad.leaves_of(model.net)
    xt = np.asarray(x) + sigma * np.asarray(z)
    loss = dsm_term(ad.mlp_forward_tape(leaves, xt), z, sigma)
    return float(loss.data), ad.backward(loss, leaves)


def loss_dsm_vr(model: FirstOrderModel, x, z, sigma):
    _check_sigma(sigma)
    leaves = ad.leaves_of(model.net)
    x = np.asarray(x)
    b = x.shape[0]
    s = ad.mlp_forward_tape(leaves, np.concatenate([x + sigma * np.asarray(z), x]))
    loss = dsm_vr_term(ad.take(s, slice(0, b)), ad.take(s, slice(b, 2 * b)), z, sigma)
    return float(loss.data), ad.backward(loss, leaves)


def joint_loss_tape(pair: ScoreModelPair, leaves, x, z, sigma, gamma=1.0,
                    diag=False, vr=False, objective="joint", detach_s1=True):
    """Build the taped objective. Returns ``(total, dsm_part, d2sm_part)`` tensors.

    ``objective`` is ``"joint"`` (second-order term + gamma * DSM) or ``"dsm"``.
    With ``detach_s1`` the first-order values enter the second-order term as
    constants, so s1 is fitted by the DSM term alone.
    """
    _check_sigma(sigma)
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    b = x.shape[0]
    need_second = objective != "dsm"
    if not diag and need_second and pair.second.mode == "diag":
        raise ValueError("full second-order loss needs a full-mode model")
    if vr:
        pts = np.concatenate([x + sigma * z, x - sigma * z, x])
    else:
        pts = x + sigma * z
    s1, alpha, beta = taped_scores(pair, leaves, pts, need_second=need_second)
    parts = [slice(i * b, (i + 1) * b) for i in range(3 if vr else 1)]

    def cut(t, k):
        return None if t is None else ad.take(t, parts[k])

    if vr:
        dsm = dsm_vr_term(cut(s1, 0), cut(s1, 2), z, sigma)
    else:
        dsm = dsm_term(cut(s1, 0), z, sigma)
    if not need_second:
        return dsm, dsm, None
    psi = psi_diag if diag else psi_full
    if detach_s1:
        s1 = ad.Tensor(s1.data)
    if vr:
        psis = [psi(cut(s1, k), cut(alpha, k), cut(beta, k)) for k in range(3)]
        d2sm = d2sm_vr_term(*psis, z, sigma, diag=diag)
    else:
        d2sm = d2sm_term(psi(s1, alpha, beta), z, sigma, diag=diag)
    total = ad.add(d2sm, ad.scale(dsm, gamma)) if gamma else d2sm
    return total, dsm, d2sm


def loss_joint(pair: ScoreModelPair, x, z, sigma, gamma=1.0, diag=False, vr=False,
               objective="joint", detach_s1=True):
    """Evaluate a joint objective; returns ``(LossReport, grads)`` with grads aligned to ``pair.arrays()``."""
    leaves = pair_leaves(pair)
    total, dsm, d2sm = joint_loss_tape(pair, leaves, x, z, sigma, gamma, diag, vr, objective, detach_s1)
    flat = _flatten(leaves)
    grads = ad.backward(total, flat)
    gnorm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    report = LossReport(
        total=float(total.data),
        dsm=float(dsm.data),
        d2sm=float("nan") if d2sm is None else float(d2sm.data),
        grad_norm=gnorm,
    )
    return report, grads


def loss_d2sm(pair, x, z, sigma, detach_s1=True):
    rep, grads = loss_joint(pair, x, z, sigma, gamma=0.0, detach_s1=detach_s1)
    return rep.d2sm, grads


def loss_d2sm_diag(pair, x, z, sigma, detach_s1=True):
    rep, grads = loss_joint(pair, x, z, sigma, gamma=0.0, diag=True, detach_s1=detach_s1)
    return rep.d2sm, grads


def loss_d2sm_vr(pair, x, z, sigma, diag=False, detach_s1=True):
    rep, grads = loss_joint(pair, x, z, sigma, gamma=0.0, diag=diag, vr=True, detach_s1=detach_s1)
    return rep.d2sm, grads


# -- Tweedie moments ------------------------------------------------------------------


def tweedie_mean(s1_value, x_noisy, sigma):
    """E[x | x~] = x~ + sigma^2 s1(x~)."""
    _check_sigma(sigma)
    return np.asarray(x_noisy, dtype=np.float64) + sigma**2 * np.asarray(s1_value, dtype=np.float64)


def _check_symmetric(s2, tol=1e-8):
    s2 = np.asarray(s2, dtype=np.float64)
    if np.max(np.abs(s2 - np.swapaxes(s2, -1, -2)), initial=0.0) > tol:
        raise ValueError("second-order score is not symmetric")
    return s2


def posterior_second_moment(s1, s2, x_noisy, sigma):
    """E[x x^T | x~] from the first two scores of the noisy density."""
    _check_sigma(sigma)
    s2 = _check_symmetric(s2)
    x = np.asarray(x_noisy, dtype=np.float64)
    s1 = np.asarray(s1, dtype=np.float64)
    d = x.shape[-1]
    s2_ = sigma**2
    outer = np.einsum("...i,...j->...ij", x, x)
    cross = s2_ * np.einsum("...i,...j->...ij", x, s1)
    return (
        outer
        + cross
        + np.swapaxes(cross, -1, -2)
        + s2_**2 * s2
        + s2_**2 * np.einsum("...i,...j->...ij", s1, s1)
        + s2_ * np.eye(d)
    )


def posterior_cov(s1, s2, x_noisy, sigma):
    """Cov[x | x~] = sigma^4 s2(x~) + sigma^2 I. ``s1`` and ``x_noisy`` are not needed but kept for symmetry."""
    _check_sigma(sigma)
    s2 = np.asarray(s2, dtype=np.float64)
    d = s2.shape[-1]
    cov = sigma**4 * s2 + sigma**2 * np.eye(d)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def moment_recursion(n, x_noisy, sigma, score_oracle, h=1e-4, max_order=3):
    """E[x^{(x)n} | x~] as a D^n tensor via the recursion

        M_n = sigma^2 dM_{n-1}/dx~ + sigma^2 M_{n-1} (x) (s1(x~) + x~ / sigma^2),

    starting from the Tweedie mean. ``score_oracle(x, k)`` returns the list
    ``[s1, ..., s_k]`` of noisy-density scores at a single point. When the
    oracle supplies the order-n score the derivative of M_{n-1} is chained
    analytically for n <= 2; otherwise it is a central difference with step ``h``.
    The appended axis of the derivative is the last tensor axis.
    """
    if n < 1:
        raise ValueError("order must be >= 1")
    if n > max_order:
        raise ValueError(f"order {n} exceeds the cost guard {max_order}; raise max_order explicitly")
    _check_sigma(sigma)
    x = np.asarray(x_noisy, dtype=np.float64)
    s1 = np.asarray(score_oracle(x, 1)[0], dtype=np.float64)
    if n == 1:
        return tweedie_mean(s1, x, sigma)
    d = x.shape[0]
    prev = moment_recursion(n - 1, x, sigma, score_oracle, h, max_order)
    if n == 2:
        s2 = np.asarray(score_oracle(x, 2)[1], dtype=np.float64)
        dprev = np.eye(d) + sigma**2 * s2
    else:
        dprev = np.empty(prev.shape + (d,))
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            up = moment_recursion(n - 1, x + e, sigma, score_oracle, h, max_order)
            dn = moment_recursion(n - 1, x - e, sigma, score_oracle, h, max_order)
            dprev[..., j] = (up - dn) / (2 * h)
    shift = s1 + x / sigma**2
    return sigma**2 * dprev + sigma**2 * np.multiply.outer(prev, shift)


def dist_oracle(noisy_dist):
    """Adapt a distribution with ``scores`` to the ``score_oracle`` protocol."""

    def oracle(x, k):
        _, s1, s2 = noisy_dist.scores(x)
        if k > 2:
            raise ValueError("distributions provide scores up to order 2")
        return [s1, s2][:k]

    return oracle
