# %% [markdown]
# # Similarity volumes, aggregation and the training objective
#
# A pair of dense features (audio frames against image cells) becomes a
# volume of inner products. Aggregating it gives one score per pair, and a
# batch of scores feeds a symmetric InfoNCE plus small regularizers.

# %%
import numpy as np

from denseground import tensor as tn
from denseground.losses import LAMBDAS, info_nce, l_dis, total_loss
from denseground.similarity import aggregate, per_head_scores, prompt_heatmap, similarity_volume

rng = np.random.default_rng(0)

# %% [markdown]
# Audio features are `(C, K, F, T)` and visual features `(C, K, H, W)`.
# The volume keeps every head, frame and cell.

# %%
audio = rng.normal(size=(4, 2, 1, 6))
visual = rng.normal(size=(4, 2, 3, 3))
vol = similarity_volume(audio, visual).tensor
print("volume shape (K, F, T, H, W):", vol.shape)
print("pair score:", float(aggregate(vol).data))
print("per-head scores:", per_head_scores(vol).data)

# %% [markdown]
# The pair score takes the best head and cell for each frame, then averages
# frames. A heatmap for a time window keeps the cells instead.

# %%
print(np.round(prompt_heatmap(vol.data, (2, 5)), 3))

# %% [markdown]
# With identical scores everywhere InfoNCE equals log B.

# %%
l_av, l_va = info_nce(np.full((4, 4), 1.0), 1.0)
print("uniform 4x4:", float((l_av + l_va).data), "log 4 =", np.log(4))
l_av, l_va = info_nce(np.eye(4) * 5.0, 1.0)
print("strong diagonal:", float((l_av + l_va).data))

# %% [markdown]
# The disentanglement term is zero when heads never fire together.

# %%
apart = np.zeros((2, 1, 4, 1, 1))
apart[0, 0, :2] = 1.0
apart[1, 0, 2:] = 1.0
together = np.ones((2, 1, 4, 1, 1))
print("disjoint heads:", float(l_dis(apart).data), "overlapping heads:", float(l_dis(together).data))

# %% [markdown]
# The full objective over a batch of all-pairs volumes `(B, B, K, F, T, H, W)`,
# with its breakdown and the weights used.

# %%
vols = rng.normal(size=(4, 4, 2, 1, 6, 3, 3))
mask = np.zeros((4, 6))
mask[:, 4:] = 1.0
out = total_loss(vols, tn.Tensor(0.0), mask, np.random.default_rng(1))
print({k: round(v, 4) for k, v in out.values().items()})
print("weights:", LAMBDAS)

# %% [markdown]
# Gradients come from the tape; central differences agree.

# %%
small = vols[:2, :2, ..., :2, :2]
err = tn.grad_check(lambda v: total_loss(v, tn.Tensor(0.0), mask[:2], np.random.default_rng(1)).total, small)
print("max relative gradient error:", err)
