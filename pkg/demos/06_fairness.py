# %% [markdown]
# # Is the bottleneck doing per-flow fair queuing?
#
# Two flow sets over 60 one-second windows: 20 equal flows, and a set where
# half the flows get four times the other half.

# %%
import numpy as np

from qchar import FlowSeries, fairness_verdict

rng = np.random.default_rng(3)
w = np.arange(60.0)
equal = FlowSeries(w, 5e6 * (1 + 0.02 * rng.standard_normal((20, 60))))
skewed = FlowSeries(w, np.vstack([np.full((10, 60), 8e6), np.full((10, 60), 2e6)]))

for name, flows in (("equal", equal), ("skewed", skewed)):
    v = fairness_verdict(flows)
    print(f"{name:7s} jain {v.jain_mean:.3f}  ratio {v.share_ratio:.2f}  -> {v.verdict}")
