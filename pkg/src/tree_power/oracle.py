"""Max-min fairness power control by bisection over the common SINR target.

For a target ``gamma`` the minimal power vector meeting every user's
SINR is the fixed point of the standard interference function
``T(p)_k = gamma * (sum_i B_ki p_i - a_k p_k + c_k) / a_k``, reached
monotonically from ``p = 0``.  Feasibility under per-user caps (UL) or a
sum budget (DL) is monotone in ``gamma``, so bisection finds the max-min
SINR.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from . import sim
from .sim import DL, UL, ChannelMoments, NetworkConfig

log = logging.getLogger(__name__)

FEAS_SLACK = 1e-6


@dataclass
class MaxMinSolution:
    p: np.ndarray
    gamma_star: float
    min_se: float
    iterations: int
    converged: bool
    side: str = UL


def _direct_fixed_point(gamma: float, moments: ChannelMoments):
    a, B, c = moments.a, moments.B, moments.c
    M = np.diag(a / gamma) - (B - np.diag(a))
    try:
        p = np.linalg.solve(M, c)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        return None
    return p


def feasible_at_target(gamma: float, moments: ChannelMoments, caps=None, budget: float | None = None,
                       tol: float = 1e-8, max_iter: int = 500) -> tuple[bool, np.ndarray]:
    """Decide whether every user can reach SINR ``gamma``.

    Exactly one of ``caps`` (per-user maxima) or ``budget`` (sum maximum)
    must be given.  Returns ``(feasible, p)`` where ``p`` is the last
    fixed-point iterate (clipped to the caps for the UL).
    """
    if gamma <= 0:
        raise ValueError("feasible_at_target: gamma must be positive")
    if (caps is None) == (budget is None):
        raise ValueError("feasible_at_target: give exactly one of caps or budget")
    a, B, c = moments.a, moments.B, moments.c
    K = a.shape[0]
    if caps is not None:
        caps = np.broadcast_to(np.asarray(caps, dtype=float), (K,))
    p = np.zeros(K)
    if np.any(a <= 0):
        return False, p

    def over(q):
        if caps is not None:
            return np.any(q > caps * (1 + 1e-12))
        return q.sum() > budget * (1 + 1e-12)

    converged = False
    for _ in range(max_iter):
        t = gamma * (B @ p - a * p + c) / a
        if over(t):
            # iterates increase monotonically: the limit violates the constraint too
            return False, (np.minimum(t, caps) if caps is not None else t)
        change = np.max(np.abs(t - p) / np.maximum(np.abs(t), 1e-300))
        p = t
        if change < tol:
            converged = True
            break
    if not converged:
        q = _direct_fixed_point(gamma, moments)
        if q is None or over(q):
            return False, p
        p = q
    achieved = sim.sinr(moments.side, moments, p)
    return bool(np.all(achieved >= gamma * (1 - FEAS_SLACK))), p


def _saturate(moments: ChannelMoments, caps, budget, lo: float, hi: float, p_lo: np.ndarray) -> np.ndarray:
    """Minimal powers for the largest target whose constraint is met exactly.

    The minimal power vector at a target gives every user that SINR.
    Solving for the target at which it meets the binding constraint
    keeps the common SINR, whereas scaling up ``p_lo`` would not.
    Returns ``p_lo`` if the bracket is unusable.
    """
    def excess(gamma):
        q = _direct_fixed_point(gamma, moments)
        if q is None:
            return 1.0
        return float(np.max(q / caps) if caps is not None else q.sum() / budget) - 1.0

    if not (excess(lo) <= 0 < excess(hi)):
        return p_lo
    gamma = brentq(excess, lo, hi, xtol=1e-15 * hi, rtol=4 * np.finfo(float).eps, maxiter=200)
    q = _direct_fixed_point(gamma, moments)
    if q is None or abs(excess(gamma)) > 1e-9:
        return p_lo
    return q


def _bisect(moments: ChannelMoments, cfg: NetworkConfig, caps, budget, cap_scale: float,
            tol: float, max_steps: int) -> MaxMinSolution:
    side = moments.side
    a, c = moments.a, moments.c
    K = a.shape[0]
    if np.any(a <= 0):
        p = caps.copy() if caps is not None else np.full(K, budget / K)
        return MaxMinSolution(p=p, gamma_star=0.0, min_se=0.0, iterations=0, converged=True, side=side)
    hi = float(np.max(cap_scale * a / c))
    lo = 0.0
    best_p = None
    steps = 0
    converged = False
    while steps < max_steps:
        steps += 1
        mid = 0.5 * (lo + hi)
        ok, p = feasible_at_target(mid, moments, caps=caps, budget=budget)
        if ok:
            lo, best_p = mid, p
        else:
            hi = mid
        if best_p is not None and (hi - lo) < tol * hi:
            converged = True
            break
    if best_p is None:
        best_p = np.full(K, 1e-30)
    else:
        best_p = _saturate(moments, caps, budget, lo, hi, best_p)
    # scale-up to the binding constraint; a rounding-level step after saturation
    if caps is not None:
        best_p = best_p * np.min(caps / np.maximum(best_p, 1e-300))
        best_p = np.minimum(best_p, caps)
    else:
        best_p = best_p * (budget / best_p.sum())
    gamma = float(np.min(sim.sinr(side, moments, best_p)))
    return MaxMinSolution(p=best_p, gamma_star=gamma, min_se=sim.se(side, gamma, cfg),
                          iterations=steps, converged=converged, side=side)


def maxmin_ul(moments: ChannelMoments, cfg: NetworkConfig, tol: float = 1e-4,
              max_steps: int = 200) -> MaxMinSolution:
    """Max-min UL powers subject to ``0 <= p_k <= P_ul_max``."""
    if moments.side != UL:
        raise ValueError("maxmin_ul needs UL moments")
    caps = np.full(moments.K, cfg.P_ul_max)
    return _bisect(moments, cfg, caps, None, cfg.P_ul_max, tol, max_steps)


def maxmin_dl(moments: ChannelMoments, cfg: NetworkConfig, tol: float = 1e-4,
              max_steps: int = 200) -> MaxMinSolution:
    """Max-min DL powers subject to ``sum_k p_k <= L * P_dl_max_per_ap``."""
    if moments.side != DL:
        raise ValueError("maxmin_dl needs DL moments")
    budget = cfg.total_dl_budget
    return _bisect(moments, cfg, None, budget, budget, tol, max_steps)


@dataclass
class ScenarioSolution:
    ul: MaxMinSolution
    dl: MaxMinSolution
    ul_moments: ChannelMoments
    dl_moments: ChannelMoments


def solve_scenario(stats: sim.ChannelStats, cfg: NetworkConfig, rng: np.random.Generator,
                   alternations: int = 2, tol: float = 1e-4) -> ScenarioSolution:
    """UL and DL max-min powers for one set of channel statistics.

    The UL combiners depend on the UL powers, so moments are first computed
    with every UE at ``P_ul_max`` and re-computed at the solved powers
    ``alternations - 1`` times.  One set of realizations is drawn and shared
    by all passes.  The DL precoders use the final UL powers.
    """
    if not 1 <= alternations <= 5:
        raise ValueError("alternations must be in 1..5")
    H, H_hat = sim.draw_realizations(stats, cfg, rng)
    p_ul = np.full(stats.K, cfg.P_ul_max)
    for _ in range(alternations):
        ul_mom = sim.moments_from_realizations(UL, H, H_hat, p_ul, stats, cfg)
        ul = maxmin_ul(ul_mom, cfg, tol=tol)
        p_ul = ul.p
    dl_mom = sim.moments_from_realizations(DL, H, H_hat, p_ul, stats, cfg)
    dl = maxmin_dl(dl_mom, cfg, tol=tol)
    return ScenarioSolution(ul=ul, dl=dl, ul_moments=ul_mom, dl_moments=dl_mom)


def grid_search_ul(moments: ChannelMoments, cfg: NetworkConfig, n: int = 200, spacing: str = "linear",
                   min_fraction: float = 1e-4):
    """Brute-force K=2 UL max-min over an ``n x n`` power grid; returns ``(p, min_se)``.

    ``spacing="log"`` uses zero plus ``n - 1`` geometric points from
    ``min_fraction * P_ul_max`` to ``P_ul_max``, which resolves the small
    powers a near user needs far better than a linear axis.
    """
    if moments.K != 2:
        raise ValueError("grid_search_ul is for K=2")
    if spacing == "linear":
        g = np.linspace(0.0, cfg.P_ul_max, n)
    elif spacing == "log":
        g = np.concatenate([[0.0], np.geomspace(min_fraction * cfg.P_ul_max, cfg.P_ul_max, n - 1)])
    else:
        raise ValueError(f"grid_search_ul: unknown spacing {spacing!r}")
    P = np.stack(np.meshgrid(g, g, indexing="ij"), axis=-1).reshape(-1, 2)
    return _grid_best(UL, moments, P, cfg)


def grid_search_dl(moments: ChannelMoments, cfg: NetworkConfig, n: int = 2000):
    """Brute-force K=2 DL max-min along the budget simplex; returns ``(p, min_se)``."""
    if moments.K != 2:
        raise ValueError("grid_search_dl is for K=2")
    t = np.linspace(0.0, 1.0, n)
    P = cfg.total_dl_budget * np.stack([t, 1.0 - t], axis=-1)
    return _grid_best(DL, moments, P, cfg)


def _grid_best(side, moments, P, cfg):
    signal = P * moments.a
    denom = P @ moments.B.T - signal + moments.c
    worst = np.min(signal / denom, axis=1)
    j = int(np.argmax(worst))
    return P[j], sim.se(side, worst[j], cfg)
