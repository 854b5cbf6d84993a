"""Stochastic simulation of the linearized dynamics and empirical thresholds.

Replicates evolve the offset x = theta - theta* under

    x <- x - (eta/B) * sum_{i in batch} (H_i x + g_i),

with a fresh uniform size-B batch (without replacement, partial
Fisher-Yates) each step, or under the mixture process that takes a
single-sample step with probability p and a full-batch step otherwise.

Every replicate draws from its own counter-based stream derived from the
run seed, so results are bit-reproducible and independent of chunking.
Aggregation keeps all replicates; a replicate whose squared norm crosses
divergence_factor * (1 + initial) is flagged and frozen at its last
state so the aggregate arrays stay finite.

Empirical threshold estimation bisects on an instability classifier.
Crossing a fixed factor alone cannot witness mean-square divergence for
step sizes between the mean-square and almost-sure thresholds (the
ensemble average is then carried by exponentially rare trajectories), so
the classifier also uses the growth slope of the ensemble second moment
over an early window in which the replicate average still concentrates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .instances import Hyperparams, MinimumClass, ProblemInstance, StreamPool, classify, stream
from .linalg import null_projectors, sym_eig

_CHUNK_ENTRY_BUDGET = 4_000_000


@dataclass(frozen=True)
class SimConfig:
    steps: int
    replicates: int
    seed: int
    divergence_factor: float = 1e6
    init_offset: float | np.ndarray = 1.0

    def __post_init__(self) -> None:
        if self.steps < 1 or self.replicates < 1:
            raise ValueError("steps and replicates must be >= 1")
        if self.divergence_factor <= 1:
            raise ValueError("divergence_factor must exceed 1")


@dataclass(frozen=True)
class EmpiricalMoments:
    replicates: int
    mean_offset: np.ndarray  # (T+1, d)
    mean_offset_par: np.ndarray
    mean_offset_perp: np.ndarray
    offset_se: np.ndarray  # (T+1, d) componentwise standard errors
    mean_sq_par: np.ndarray  # (T+1,)
    mean_sq_perp: np.ndarray
    sq_par_se: np.ndarray
    sq_perp_se: np.ndarray
    mean_quad: np.ndarray  # (T+1,) mean of x' Hbar x
    diverged: bool
    divergence_step: int | None
    diverged_count: int

    @property
    def mean_sq(self) -> np.ndarray:
        return self.mean_sq_par + self.mean_sq_perp


def initial_offset(inst: ProblemInstance, cfg: SimConfig) -> np.ndarray:
    if isinstance(cfg.init_offset, np.ndarray):
        x0 = np.asarray(cfg.init_offset, dtype=float)
        if x0.shape != (inst.d,):
            raise ValueError(f"init_offset must have shape ({inst.d},), got {x0.shape}")
        return x0.copy()
    scale = float(cfg.init_offset)
    _, p_range = null_projectors(inst.mean_hessian())
    rng = stream(cfg.seed, 0)
    for _ in range(64):
        z = p_range @ rng.standard_normal(inst.d)
        nz = np.linalg.norm(z)
        if nz > 1e-8:
            return (scale / nz) * z
    raise ValueError("could not draw an initial offset in the range of the mean Hessian")


def _fisher_yates_batches(rng: np.random.Generator, n: int, batch: int, steps: int) -> np.ndarray:
    """(steps, batch) uniform without-replacement batches; O(B) draws per step."""
    draws = np.empty((steps, batch), dtype=np.int64)
    for i in range(batch):
        draws[:, i] = rng.integers(i, n, size=steps)
    perm = np.tile(np.arange(n, dtype=np.int64), (steps, 1))
    rows = np.arange(steps)
    for i in range(batch):
        j = draws[:, i]
        tmp = perm[rows, i].copy()
        perm[rows, i] = perm[rows, j]
        perm[rows, j] = tmp
    return perm[:, :batch]


class _Accumulator:
    def __init__(self, steps: int, d: int):
        self.sum_x = np.zeros((steps + 1, d))
        self.sum_x_sq = np.zeros((steps + 1, d))
        self.sum_sq_par = np.zeros(steps + 1)
        self.sum_sq_perp = np.zeros(steps + 1)
        self.sum_sq_par_sq = np.zeros(steps + 1)
        self.sum_sq_perp_sq = np.zeros(steps + 1)
        self.sum_quad = np.zeros(steps + 1)

    def add(self, t: int, x: np.ndarray, p_null: np.ndarray, hbar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        x_par = x @ p_null
        x_perp = x - x_par
        sq_par = np.sum(x_par * x_par, axis=1)
        sq_perp = np.sum(x_perp * x_perp, axis=1)
        self.sum_x[t] += x.sum(axis=0)
        self.sum_x_sq[t] += np.sum(x * x, axis=0)
        self.sum_sq_par[t] += sq_par.sum()
        self.sum_sq_perp[t] += sq_perp.sum()
        self.sum_sq_par_sq[t] += np.sum(sq_par * sq_par)
        self.sum_sq_perp_sq[t] += np.sum(sq_perp * sq_perp)
        self.sum_quad[t] += float(np.sum((x @ hbar) * x))
        return sq_par, sq_perp


def _finalize(
    acc: _Accumulator,
    inst: ProblemInstance,
    cfg: SimConfig,
    p_null: np.ndarray,
    diverged_count: int,
    first_replicate_cross: int | None,
) -> EmpiricalMoments:
    r = cfg.replicates
    mean_x = acc.sum_x / r
    var_x = np.maximum(acc.sum_x_sq / r - mean_x * mean_x, 0.0)
    bessel = r / max(r - 1, 1)
    offset_se = np.sqrt(var_x * bessel / r)
    mean_sq_par = acc.sum_sq_par / r
    mean_sq_perp = acc.sum_sq_perp / r
    var_par = np.maximum(acc.sum_sq_par_sq / r - mean_sq_par**2, 0.0)
    var_perp = np.maximum(acc.sum_sq_perp_sq / r - mean_sq_perp**2, 0.0)
    threshold = cfg.divergence_factor * (1.0 + mean_sq_perp[0])
    crossed = np.nonzero(mean_sq_perp > threshold)[0]
    agg_step = int(crossed[0]) if crossed.size else None
    steps = [s for s in (agg_step, first_replicate_cross) if s is not None]
    divergence_step = min(steps) if steps else None
    return EmpiricalMoments(
        replicates=r,
        mean_offset=mean_x,
        mean_offset_par=mean_x @ p_null,
        mean_offset_perp=mean_x - mean_x @ p_null,
        offset_se=offset_se,
        mean_sq_par=mean_sq_par,
        mean_sq_perp=mean_sq_perp,
        sq_par_se=np.sqrt(var_par * bessel / r),
        sq_perp_se=np.sqrt(var_perp * bessel / r),
        mean_quad=acc.sum_quad / r,
        diverged=divergence_step is not None,
        divergence_step=divergence_step,
        diverged_count=diverged_count,
    )


def _run(inst: ProblemInstance, cfg: SimConfig, kernel_builder, entries_per_replicate: int) -> EmpiricalMoments:
    if classify(inst) is MinimumClass.INVALID:
        raise ValueError("instance is not a regular or interpolating minimum")
    d = inst.d
    t_steps = cfg.steps
    x0 = initial_offset(inst, cfg)
    hbar = inst.mean_hessian()
    p_null, _ = null_projectors(hbar)
    acc = _Accumulator(t_steps, d)
    per_replicate_threshold = cfg.divergence_factor * (1.0 + float(x0 @ x0))

    diverged_count = 0
    first_cross: int | None = None
    chunk_size = max(1, min(cfg.replicates, _CHUNK_ENTRY_BUDGET // max(1, entries_per_replicate)))
    start = 0
    while start < cfg.replicates:
        stop = min(start + chunk_size, cfg.replicates)
        size = stop - start
        kernel = kernel_builder(range(start, stop))
        x = np.tile(x0, (size, 1))
        alive = np.ones(size, dtype=bool)
        flagged = np.zeros(size, dtype=bool)
        acc.add(0, x, p_null, hbar)
        for t in range(1, t_steps + 1):
            x_new = kernel(t - 1, x)
            x = np.where(alive[:, None], x_new, x)
            sq_par, sq_perp = acc.add(t, x, p_null, hbar)
            crossing = alive & ((sq_par + sq_perp) > per_replicate_threshold)
            if np.any(crossing):
                flagged |= crossing
                alive &= ~crossing
                first_cross = t if first_cross is None else min(first_cross, t)
        diverged_count += int(flagged.sum())
        start = stop
    return _finalize(acc, inst, cfg, p_null, diverged_count, first_cross)


def simulate_sgd(inst: ProblemInstance, hp: Hyperparams, cfg: SimConfig) -> EmpiricalMoments:
    """Monte-Carlo moments of mini-batch SGD with uniform batches."""
    n = inst.n
    b = hp.batch
    if not 1 <= b <= n:
        raise ValueError(f"batch size {b} out of range [1, {n}]")
    eta = hp.eta
    interpolating = bool(np.all(inst.gradients == 0.0))
    hbar = inst.mean_hessian()
    gbar = inst.gradients.mean(axis=0)

    def builder(replicate_range):
        if b == n:

            def kernel(t, x):
                return x - eta * (x @ hbar + gbar)

            return kernel
        pool = StreamPool()
        batches = np.stack(
            [_fisher_yates_batches(pool.get(cfg.seed, 2 * r + 1), n, b, cfg.steps) for r in replicate_range]
        )

        def kernel(t, x):
            idx = batches[:, t, :]
            h_sum = inst.hessians[idx].sum(axis=1)
            drift = np.einsum("cij,cj->ci", h_sum, x)
            if not interpolating:
                drift = drift + inst.gradients[idx].sum(axis=1)
            return x - (eta / b) * drift

        return kernel

    return _run(inst, cfg, builder, entries_per_replicate=cfg.steps * b)


def simulate_mixture(inst: ProblemInstance, eta: float, p: float, cfg: SimConfig) -> EmpiricalMoments:
    """Monte-Carlo moments of the mixture process: one uniform sample with
    probability p, the full batch otherwise.

    The index stream is consumed every step regardless of the branch, so
    with p = 1 and matched seeds the paths coincide exactly with
    simulate_sgd at batch size one.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {p}")
    n = inst.n
    hbar = inst.mean_hessian()
    gbar = inst.gradients.mean(axis=0)
    interpolating = bool(np.all(inst.gradients == 0.0))

    def builder(replicate_range):
        reps = list(replicate_range)
        pool = StreamPool()
        idx_all = np.stack([pool.get(cfg.seed, 2 * r + 1).integers(0, n, size=cfg.steps) for r in reps])
        if p == 0.0:
            single_all = np.zeros((len(reps), cfg.steps), dtype=bool)
        elif p == 1.0:
            single_all = np.ones((len(reps), cfg.steps), dtype=bool)
        else:
            single_all = np.stack([pool.get(cfg.seed, 2 * r + 2).random(cfg.steps) < p for r in reps])

        def kernel(t, x):
            idx = idx_all[:, t]
            single = single_all[:, t]
            h_sel = inst.hessians[idx]
            drift_single = np.einsum("cij,cj->ci", h_sel, x)
            if not interpolating:
                drift_single = drift_single + inst.gradients[idx]
            x_single = x - eta * drift_single
            x_full = x - eta * (x @ hbar + gbar)
            return np.where(single[:, None], x_single, x_full)

        return kernel

    return _run(inst, cfg, builder, entries_per_replicate=2 * cfg.steps)


def growth_window(cfg: SimConfig) -> tuple[int, int]:
    """Window [lo, hi] over which the ensemble average of the squared
    offset still concentrates (hi scales with log2 of the replicates)."""
    hi = min(cfg.steps, max(8, int(math.log2(cfg.replicates)) - 2))
    lo = max(2, hi // 3)
    return lo, hi


def classify_unstable(em: EmpiricalMoments, cfg: SimConfig) -> bool:
    """True when the run shows mean-square instability: a divergence flag,
    or positive growth of the ensemble perpendicular second moment over
    the concentration window."""
    if em.diverged:
        return True
    lo, hi = growth_window(cfg)
    series = em.mean_sq_perp[lo : hi + 1]
    if np.any(series <= 0.0):
        return bool(series[-1] > series[0])
    t = np.arange(lo, hi + 1, dtype=float)
    slope = float(np.polyfit(t, np.log(series), 1)[0])
    return slope > 0.0


def empirical_threshold(
    inst: ProblemInstance,
    batch: int,
    cfg: SimConfig,
    eta_lo: float,
    eta_hi: float,
    bisect_tol: float,
) -> float:
    """Bisect the instability classifier between a stable and an unstable
    step size; returns the midpoint of the final bracket.

    When cfg.init_offset is a scalar the shared initial offset is aligned
    with the top eigenvector of the mean Hessian (scaled by that factor),
    which excites the dominant mode immediately and removes most of the
    transient bias from the growth window.
    """
    if bisect_tol <= 0:
        raise ValueError("bisect_tol must be positive")
    if not 0 <= eta_lo < eta_hi:
        raise ValueError(f"invalid bracket [{eta_lo}, {eta_hi}]")
    if isinstance(cfg.init_offset, np.ndarray):
        base_cfg = cfg
    else:
        top = sym_eig(inst.mean_hessian()).vectors[:, 0]
        base_cfg = replace(cfg, init_offset=float(cfg.init_offset) * top)

    evaluations = 0

    def unstable_at(eta: float) -> bool:
        nonlocal evaluations
        run_cfg = replace(base_cfg, seed=int(stream(cfg.seed, 10_000 + evaluations).integers(0, 2**63 - 1)))
        evaluations += 1
        em = simulate_sgd(inst, Hyperparams(eta=eta, batch=batch), run_cfg)
        return classify_unstable(em, run_cfg)

    if unstable_at(eta_lo):
        raise ValueError(f"bracket invalid: eta_lo={eta_lo} already classifies as unstable")
    if not unstable_at(eta_hi):
        raise ValueError(f"bracket invalid: eta_hi={eta_hi} classifies as stable")
    lo, hi = eta_lo, eta_hi
    while hi - lo >= bisect_tol:
        mid = 0.5 * (lo + hi)
        if unstable_at(mid):
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_empirical_csv(path, em: EmpiricalMoments) -> None:
    """CSV columns: t, trace_sigma_perp, trace_sigma_par, mu_norm,
    loss_gap_estimate, replicates, diverged_count."""
    lines = ["t,trace_sigma_perp,trace_sigma_par,mu_norm,loss_gap_estimate,replicates,diverged_count"]
    for t in range(em.mean_sq_perp.size):
        row = (
            str(t),
            _fmt(em.mean_sq_perp[t]),
            _fmt(em.mean_sq_par[t]),
            _fmt(np.linalg.norm(em.mean_offset[t])),
            _fmt(0.5 * em.mean_quad[t]),
            str(em.replicates),
            str(em.diverged_count),
        )
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
