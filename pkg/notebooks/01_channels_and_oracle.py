# ---
# jupyter:
#   jupytext:
#     formats: py:percent
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Channels and the max-min oracle
#
# A small cell-free deployment: statistics of the correlated Rayleigh
# channels, Monte-Carlo SINR coefficients, and the bisection oracle that
# labels each scenario with max-min fair UL and DL powers.

# %%
import numpy as np

from tree_power import oracle, sim
from tree_power.sim import DL, UL

cfg = sim.NetworkConfig(L=9, N=2, K=2, mc_realizations=100)
rng = np.random.default_rng(11)
ap, ue = sim.generate_layout(cfg, rng)
stats = sim.channel_statistics(ap, ue, cfg, rng)
print("large-scale gains (dB), AP x UE:")
print(np.round(10 * np.log10(stats.beta), 1))

# %% [markdown]
# ## Estimation quality
#
# The trace of the estimate covariance over the trace of the channel
# covariance is the fraction of channel energy the pilots capture.

# %%
captured = np.trace(stats.Phi, axis1=-2, axis2=-1).real / np.trace(stats.beta[..., None, None] * stats.R,
                                                                     axis1=-2, axis2=-1).real
print(np.round(captured, 3))

# %% [markdown]
# ## Oracle
#
# Bisection over the common SINR target, then a root solve that makes the
# binding constraint tight while keeping every SINR equal.

# %%
sol = oracle.solve_scenario(stats, cfg, rng)
print("UL powers (mW):", np.round(1e3 * sol.ul.p, 4), " min SE", round(sol.ul.min_se, 4))
print("DL powers (W): ", np.round(sol.dl.p, 4), " sum", sol.dl.p.sum(), " min SE", round(sol.dl.min_se, 4))
print("UL SINRs:", sim.sinr(UL, sol.ul_moments, sol.ul.p))
print("DL SINRs:", sim.sinr(DL, sol.dl_moments, sol.dl.p))

# %% [markdown]
# ## Brute-force cross-check
#
# For two users an exhaustive grid bounds the oracle from below.  A
# geometric power axis resolves the small powers of a near user.

# %%
for spacing in ("linear", "log"):
    _, se = oracle.grid_search_ul(sol.ul_moments, cfg, spacing=spacing)
    print(f"UL grid ({spacing}): {se:.5f}  oracle: {sol.ul.min_se:.5f}")
_, se = oracle.grid_search_dl(sol.dl_moments, cfg)
print(f"DL simplex grid: {se:.5f}  oracle: {sol.dl.min_se:.5f}")
