# %% [markdown]
# # DropTail vs DropFront
#
# Six 1500 B packets 10 us apart into a 3-packet queue draining at 120 Mb/s
# (one packet per 100 us). Small enough to check by hand.

# %%
import numpy as np

from qchar import ArrivalTrace, DropPolicy, QueueConfig, Smooth, arrivals_from_schedule, simulate
from qchar import BurstSpec, make_burst_schedule

arr = ArrivalTrace.uniform([0, 10, 20, 30, 40, 50], 1500)
for pol in (DropPolicy.DROP_TAIL, DropPolicy.DROP_FRONT):
    sim = simulate(arr, QueueConfig(3, Smooth(120_000_000), pol))
    kept = np.flatnonzero(sim.delivered)
    print(pol.value, "delivers", kept.tolist(), "delays", sim.delay_us[kept].tolist())

# %% [markdown]
# Now a real burst: 6000 packets at 500 Mb/s into K=1500 draining at 250 Mb/s.
# DropTail delays climb to K/mu and stay there. Under DropFront a packet only
# moves toward the head as fast as new arrivals push it, so its wait is
# K/lambda while the burst lasts and rises to K/mu once arrivals stop.

# %%
arr = arrivals_from_schedule(make_burst_schedule(BurstSpec(6000, 1500, 500_000_000)))
for pol in (DropPolicy.DROP_TAIL, DropPolicy.DROP_FRONT):
    sim = simulate(arr, QueueConfig(1500, Smooth(250_000_000), pol))
    d = sim.delay_us[sim.delivered]
    print(f"{pol.value:10s} loss {sim.loss_fraction:.3f}  median {np.median(d) / 1e3:.1f} ms  "
          f"last {d[-1] / 1e3:.1f} ms")
print("K/lambda = 36 ms, K/mu = 72 ms")
