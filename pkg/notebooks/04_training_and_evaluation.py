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
# # Training and evaluation
#
# A few epochs on a tiny corpus, then the spectral-efficiency gap to the
# oracle, label CDF agreement and the latency benchmark.

# %%
import numpy as np

from tree_power import dataset as D
from tree_power import evalbench as E
from tree_power import model as M
from tree_power import sim
from tree_power import trainer as T

net = sim.NetworkConfig(L=4, N=2, mc_realizations=30)
corpus = D.build_corpus([(2, 4, 24), (4, 4, 24)], net, base_seed=1)
train, val = D.stratified_split(corpus, 0.25, np.random.default_rng(0))
model_cfg = M.ModelConfig(d_enc=8, d_mod=16, A=2, S=1, decoder_hidden=16)
params, rep = T.fit(model_cfg, train, val, T.TrainConfig(epochs=10, batch_size=8, seed=0))
print("val loss:", np.round(rep.val_loss, 4), " best epoch", rep.best_epoch)

# %% [markdown]
# ## Spectral efficiency against the oracle
#
# Each test sample is re-solved on fresh Monte-Carlo realizations, and
# the predicted powers are scored on the same realizations.

# %%
test = D.build_corpus([(2, 4, 6), (4, 4, 6)], net, base_seed=2, split_tag="test")
test.meta = corpus.meta
rows, groups, skipped = E.evaluate_se(E.model_predictor(params, model_cfg, corpus.meta, net), test, net)
for g in groups:
    print(g)

# %% [markdown]
# ## Power distributions

# %%
cdfs = E.power_cdfs(params, model_cfg, test, net)
print("KS UL", round(cdfs["ks_ul"], 3), " KS DL", round(cdfs["ks_dl"], 3))

# %% [markdown]
# ## Latency
#
# Single-threaded forward passes at two network sizes.

# %%
cfg = M.ModelConfig()
for kind in ("tree", "full_attention"):
    rows = E.latency_bench(kind, [10, 40], M.init_params(cfg, kind=kind), cfg, reps=30, warmup=5)
    print(kind, [round(r["mean_ms"], 2) for r in rows])
