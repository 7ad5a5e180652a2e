# %% [markdown]
# # Loss and delay over a campaign grid
#
# Simulate every cell of a small grid against one queue and summarize.
# Below the drain rate nothing is lost; above it, loss grows with burst size.

# %%
import numpy as np

from qchar import CampaignGrid, DropPolicy, PacketTrace, QueueConfig, Smooth, heatmap
from qchar import BurstSpec, make_burst_schedule, simulate_schedule
from qchar.analysis import heatmap_csv
from qchar.plotting import heatmap_svg

grid = CampaignGrid(burst_sizes=(500, 1000, 2000, 4000, 6000),
                    send_rates=(100_000_000, 200_000_000, 300_000_000, 500_000_000))
cfg = QueueConfig(1500, Smooth(250_000_000), DropPolicy.DROP_FRONT)
traces = []
for size, rate in grid.cells:
    sched = make_burst_schedule(BurstSpec(size, grid.payload_size, rate))
    traces.append(PacketTrace.from_sim(simulate_schedule(sched, cfg), sched.burst_boundaries))
cells = heatmap(traces, grid)

# %%
loss = np.array([c.loss_fraction for c in cells]).reshape(len(grid.burst_sizes), -1)
print("loss, rows = burst size, cols = rate")
print(np.round(loss, 3))

# %%
with open("heatmap.svg", "w") as fh:
    fh.write(heatmap_svg(heatmap_csv(cells)))
