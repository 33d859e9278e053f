"""Langevin and diagonal-Ozaki samplers, ESS diagnostics and step-size search.

Chains are stored as ``(C, D)`` position arrays. Each chain draws its noise
from its own Philox stream keyed by ``(seed, chain)``, so results do not
depend on how chains are batched.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError

METHODS = ("langevin", "ozaki-diag")
INITS = ("gaussian-noise", "fixed-point", "data-sample")
TAYLOR_CUTOFF = 1e-6


@dataclass
class SamplerConfig:
    method: str = "langevin"
    step_size: float = 0.01
    iterations: int = 10000
    burn_in: int = 1000
    chains: int = 32
    seed: int = 0
    init: str = "gaussian-noise"
    init_point: tuple | None = None
    keep_history: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if not self.step_size > 0:
            raise ValueError("step size must be positive")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.chains < 1:
            raise ValueError("need at least one chain")
        if self.init not in INITS:
            raise ValueError(f"init must be one of {INITS}")


@dataclass
class EssReport:
    per_dim: list[float]
    cutoff_lags: list[int]
    draws: int

    @property
    def min_ess(self) -> float:
        return float(min(self.per_dim))

    def to_json(self) -> str:
        return json.dumps(
            {"per_dim": self.per_dim, "min_ess": self.min_ess,
             "cutoff_lags": self.cutoff_lags, "draws": self.draws},
            indent=2, sort_keys=True,
        )


@dataclass
class ChainState:
    positions: np.ndarray
    history: np.ndarray | None = None  # (T - B, C, D)
    clamped: int = 0
    stream_ids: list = field(default_factory=list)


# -- single steps ---------------------------------------------------------------


def langevin_step(x, s1_fn, eps, rng=None, z=None):
    """x + eps/2 s1(x) + sqrt(eps) z."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    s1 = np.asarray(s1_fn(x), dtype=np.float64)
    if not np.all(np.isfinite(s1)):
        raise FloatingPointError("non-finite score value")
    if z is None:
        z = rng.standard_normal(x.shape)
    return x + 0.5 * eps * s1 + np.sqrt(eps) * z


def ozaki_coefficients(c, eps):
    """Per-coordinate drift multiplier m and noise variance v for curvature ``c``.

    m = (e^{eps c} - 1)/c, v = (e^{2 eps c} - 1)/c, with the Taylor forms
    eps (1 + eps c / 2) and 2 eps (1 + eps c) when |eps c| < 1e-6. Curvatures
    above 10/eps are clamped. Returns ``(m, v, n_clamped)``.
    """
    c = np.asarray(c, dtype=np.float64)
    c_max = 10.0 / eps
    over = c > c_max
    c = np.where(over, c_max, c)
    ec = eps * c
    small = np.abs(ec) < TAYLOR_CUTOFF
    safe_c = np.where(small, 1.0, c)
    m = np.where(small, eps * (1.0 + 0.5 * ec), np.expm1(ec) / safe_c)
    v = np.where(small, 2.0 * eps * (1.0 + ec), np.expm1(2.0 * ec) / safe_c)
    if np.any(~(v > 0)):
        raise FloatingPointError("non-positive Ozaki noise variance")
    return m, v, int(np.count_nonzero(over))


def ozaki_diag_step(x, s1_fn, s2diag_fn, eps, rng=None, z=None, return_clamped=False):
    """Diagonal Ozaki update x + m * s1(x) + sqrt(v) * z."""
    if not eps > 0:
        raise ValueError("step size must be positive")
    x = np.asarray(x, dtype=np.float64)
    s1 = np.asarray(s1_fn(x), dtype=np.float64)
    c = np.asarray(s2diag_fn(x), dtype=np.float64)
    if not (np.all(np.isfinite(s1)) and np.all(np.isfinite(c))):
        raise FloatingPointError("non-finite score value")
    m, v, n_clamped = ozaki_coefficients(c, eps)
    if z is None:
        z = rng.standard_normal(x.shape)
    out = x + m * s1 + np.sqrt(v) * z
    return (out, n_clamped) if return_clamped else out


# -- chains ---------------------------------------------------------------------


def chain_rng(seed, chain, stream=0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(chain), stream])))


def _initial_positions(cfg: SamplerConfig, dim, data=None):
    if cfg.init == "fixed-point":
        if cfg.init_point is None:
            return np.zeros((cfg.chains, dim))
        p = np.asarray(cfg.init_point, dtype=np.float64)
        return np.repeat(p[None], cfg.chains, axis=0)
    if cfg.init == "data-sample":
        if data is None:
            raise ValueError("data-sample init needs data")
        rng = chain_rng(cfg.seed, 0, stream=2)
        return np.asarray(data, dtype=np.float64)[rng.integers(0, len(data), size=cfg.chains)]
    return np.stack([chain_rng(cfg.seed, c, stream=1).standard_normal(dim) for c in range(cfg.chains)])


def run_chains(cfg: SamplerConfig, s1_fn, s2diag_fn=None, dim=None, data=None, chunk=1000):
    """Run ``cfg.chains`` chains; returns ``(ChainState, EssReport)``.

    ``s1_fn`` and ``s2diag_fn`` map a ``(C, D)`` array to ``(C, D)``. Burn-in
    draws are discarded; ESS is computed on the retained ``(T - B, C, D)`` block.
    """
    if cfg.method == "ozaki-diag" and s2diag_fn is None:
        raise ValueError("ozaki-diag needs a diagonal second-order score")
    if dim is None:
        dim = len(cfg.init_point) if cfg.init_point is not None else np.asarray(data).shape[1]
    x = _initial_positions(cfg, dim, data)
    rngs = [chain_rng(cfg.seed, c) for c in range(cfg.chains)]
    kept = cfg.iterations - cfg.burn_in
    history = np.empty((kept, cfg.chains, dim))
    clamped = 0
    noise = None
    for t in range(cfg.iterations):
        k = t % chunk
        if k == 0:
            n = min(chunk, cfg.iterations - t)
            noise = np.stack([r.standard_normal((n, dim)) for r in rngs], axis=1)
        z = noise[k]
        last = x
        try:
            if cfg.method == "langevin":
                x = langevin_step(x, s1_fn, cfg.step_size, z=z)
            else:
                x, nc = ozaki_diag_step(x, s1_fn, s2diag_fn, cfg.step_size, z=z, return_clamped=True)
                clamped += nc
        except FloatingPointError as exc:
            raise DivergenceError(f"{exc} at step {t}", t, last) from None
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite position at step {t}", t, last)
        if t >= cfg.burn_in:
            history[t - cfg.burn_in] = x
    state = ChainState(
        positions=x,
        history=history if cfg.keep_history else None,
        clamped=clamped,
        stream_ids=[[cfg.seed, c] for c in range(cfg.chains)],
    )
    return state, effective_sample_size(history)


# -- diagnostics ------------------------------------------------------------------


def effective_sample_size(draws, max_lag=None) -> EssReport:
    """Multi-chain ESS per dimension with Geyer's initial monotone sequence.

    ``draws`` is ``(N, C, D)`` (or ``(N, D)`` for one chain). Autocovariances
    are direct sums up to ``max_lag`` (default N/10), combined across chains
    with the between/within variance correction.
    """
    draws = np.asarray(draws, dtype=np.float64)
    if draws.ndim == 2:
        draws = draws[:, None, :]
    n, c, d = draws.shape
    total = n * c
    if n < 4:
        raise ValueError("need at least 4 draws per chain")
    max_lag = max(2, n // 10) if max_lag is None else max_lag
    centered = draws - draws.mean(axis=0)
    chain_var = np.sum(centered**2, axis=0) / (n - 1)  # (C, D)
    w = chain_var.mean(axis=0)
    b_over_n = draws.mean(axis=0).var(axis=0, ddof=1) if c > 1 else np.zeros(d)
    var_plus = (n - 1) / n * w + b_over_n

    ess, cutoffs = [], []
    for j in range(d):
        xj = centered[:, :, j]
        if var_plus[j] <= 0:
            ess.append(float(total))
            cutoffs.append(0)
            continue

        def rho(t, xj=xj, j=j):
            if t == 0:
                acov = np.mean(np.sum(xj * xj, axis=0) / n)
            else:
                acov = np.mean(np.sum(xj[t:] * xj[:-t], axis=0) / n)
            return 1.0 - (w[j] - acov) / var_plus[j]

        tau = -1.0
        prev_pair = np.inf
        t = 0
        while t + 1 <= max_lag:
            pair = rho(t) + rho(t + 1)
            if pair < 0:
                break
            pair = min(pair, prev_pair)
            tau += 2.0 * pair
            prev_pair = pair
            t += 2
        cutoffs.append(t)
        ess.append(float(np.clip(total / max(tau, 1e-12), 1.0, total)))
    return EssReport(ess, cutoffs, total)


def mode_switches(history, modes, radius):
    """Count label changes per chain; a chain commits to a mode only inside ``radius`` of it."""
    history = np.asarray(history)
    modes = np.asarray(modes, dtype=np.float64)
    n, c, _ = history.shape
    dist = np.linalg.norm(history[:, :, None, :] - modes[None, None], axis=-1)  # (N, C, K)
    near = dist.argmin(axis=-1)
    inside = dist.min(axis=-1) < radius
    counts = np.zeros(c, dtype=int)
    for ch in range(c):
        label = -1
        for t in np.flatnonzero(inside[:, ch]):
            lab = near[t, ch]
            if label >= 0 and lab != label:
                counts[ch] += 1
            label = lab
    return counts


def tune_step_size(method, s1_fn, s2diag_fn, grid, dim, iterations=2000, burn_in=200,
                   chains=8, seed=0, init="gaussian-noise", init_point=None):
    """Pick the step size with the largest pilot min-ESS among non-divergent runs.

    Returns ``(best_eps, table)``; ``table`` has one dict per grid point.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("empty step-size grid")
    table = []
    for eps in grid:
        cfg = SamplerConfig(method=method, step_size=eps, iterations=iterations, burn_in=burn_in,
                            chains=chains, seed=seed, init=init, init_point=init_point)
        row = {"step_size": eps, "diverged": False, "min_ess": float("nan"), "clamped": 0}
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                state, rep = run_chains(cfg, s1_fn, s2diag_fn, dim=dim)
            row["min_ess"] = rep.min_ess
            row["clamped"] = state.clamped
        except DivergenceError as exc:
            row["diverged"] = True
            row["divergence_step"] = exc.step
        table.append(row)
    ok = [r for r in table if not r["diverged"]]
    if not ok:
        raise DivergenceError("every step size in the grid diverged", -1, None)
    best = max(ok, key=lambda r: r["min_ess"])
    return best["step_size"], table


def write_trajectory_csv(path, history, burn_in=0):
    """Rows ``iteration,chain,x0..x{D-1}``; iteration counts from the first retained step."""
    history = np.asarray(history)
    n, c, d = history.shape
    with open(path, "w") as fh:
        fh.write(",".join(["iteration", "chain"] + [f"x{i}" for i in range(d)]) + "\n")
        for t in range(n):
            for ch in range(c):
                vals = ",".join(repr(float(v)) for v in history[t, ch])
                fh.write(f"{t + burn_in},{ch},{vals}\n")


def read_trajectory_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    it = data[:, 0].astype(int)
    ch = data[:, 1].astype(int)
    n, c = it.max() - it.min() + 1, ch.max() + 1
    out = np.empty((n, c, data.shape[1] - 2))
    out[it - it.min(), ch] = data[:, 2:]
    return out
