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
# # Building a labelled corpus
#
# Each sample is generated from a seed derived from the corpus seed and
# its group, so any sample can be regenerated on its own.

# %%
import tempfile
from pathlib import Path

import numpy as np

from tree_power import dataset as D
from tree_power import sim

cfg = sim.NetworkConfig(N=2, mc_realizations=50)
ds = D.build_corpus([(2, 4, 6), (4, 4, 6)], cfg, base_seed=7)
print(len(ds), "samples;", ds.n_failed, "excluded")
print(ds.meta)

# %% [markdown]
# ## Regeneration from a seed

# %%
s = ds.samples[3]
again = D.generate_sample(cfg.replace(K=s.K, L=s.L), s.seed)
print(np.array_equal(again.p_ul_opt, s.p_ul_opt), np.array_equal(again.p_dl_opt, s.p_dl_opt))

# %% [markdown]
# ## Features
#
# Positions and labels are min-max normalized with corpus-wide bounds;
# the model sees jittered UE positions.

# %%
ap, ue, target = D.sample_features(s, ds.meta)
print(ap.shape, ue.shape, target.shape)
print(np.round(target, 3))

# %% [markdown]
# ## Persistence

# %%
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "corpus.jsonl"
    D.save(ds, path)
    back = D.load(path)
    print(path.stat().st_size, "bytes;", len(back), "samples reloaded")
