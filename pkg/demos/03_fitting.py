# %% [markdown]
# # Recovering K and mu from a trace
#
# Build a trace from a known queue, then search capacity and drain rate on a
# grid. The search scores each candidate by loss difference plus a normalized
# distance between binned queuing-delay curves.

# %%
from qchar import BurstSpec, PacketTrace, QueueConfig, SearchSpace, Smooth, fit, make_burst_schedule
from qchar import simulate_schedule

sched = make_burst_schedule(BurstSpec(6000, 1500, 500_000_000))
truth = QueueConfig(1437, Smooth(187_300_000))
emp = PacketTrace.from_sim(simulate_schedule(sched, truth), sched.burst_boundaries, base_owd_ns=12_000_000)

# %%
space = SearchSpace(800, 2400, 100, 50_000_000, 400_000_000, 25_000_000)
res = fit(emp, space)
print("fitted K", res.capacity, " mu", res.rates[0] / 1e6, "Mb/s  score", round(res.score, 4))

# %% [markdown]
# Both values sit off the coarse grid; the refinement pass lands within a few
# percent. Search the drop policy too:

# %%
res = fit(emp, SearchSpace(1200, 1700, 100, 150_000_000, 250_000_000, 25_000_000, policy=None))
print(res.config.drop_policy.value, res.capacity, res.rates[0] / 1e6)
