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
# # Autodiff engine and the tree model
#
# The model runs on a small reverse-mode engine over numpy arrays.
# Gradients are checked against central differences.

# %%
import numpy as np

from tree_power import autodiff as ad
from tree_power import evalbench as E
from tree_power import model as M

r = np.random.default_rng(0)
W = r.normal(size=(3, 4))
err = ad.gradient_check(lambda p: ad.sum(ad.softmax(ad.matmul(p["x"], p["W"])) * r.normal(size=(2, 4))),
                        dict(x=r.normal(size=(2, 3)), W=W))
print("softmax(xW) gradient relative error:", err)

# %% [markdown]
# The projection above is redrawn on every call, so that check is
# meaningless.  Fixing the projection restores agreement.

# %%
proj = r.normal(size=(2, 4))
err = ad.gradient_check(lambda p: ad.sum(ad.softmax(ad.matmul(p["x"], p["W"])) * proj),
                        dict(x=r.normal(size=(2, 3)), W=W))
print("softmax(xW) gradient relative error:", err)

# %% [markdown]
# ## Tree compression
#
# Users are merged pairwise level by level.  With the default padding an
# odd node moves up unmerged, so K users take K - 1 merges.

# %%
for K in (2, 5, 8, 13):
    print(K, M.tree_schedule(K), M.n_merges(K), "| zero padding:", M.n_merges(K, "zero"))

# %% [markdown]
# ## Parameters and cost

# %%
cfg = M.ModelConfig()
tree = M.init_params(cfg, seed=0)
base = M.init_params(cfg, seed=0, kind="full_attention")
print("tree params:", M.param_count(tree), " full-attention params:", M.param_count(base))
for K in (10, 20, 40):
    print(K, E.flop_count("tree", K, 16, cfg), E.flop_count("full_attention", K, 16, cfg))

# %% [markdown]
# ## Inference
#
# The rescaler maps outputs to watts: UL powers stay in the label range
# and DL powers sum to the budget.

# %%
rc = M.RescaleConfig(ul_min=1e-4, ul_max=0.1, dl_min=0.01, dl_max=1.5, total_dl_budget=3.2)
p_ul, p_dl = M.predict(tree, r.random((16, 2)), r.random((6, 2)), cfg, rc)
print(np.round(p_ul, 4), np.round(p_dl, 4), p_dl.sum())
