# %% [markdown]
# # Late rate adaptation
#
# A link that switches from 150 to 200 Mb/s partway through a burst shows a
# kink in the cumulative receive count. Segmented least squares finds it.

# %%
from qchar import BurstSpec, PacketTrace, Piecewise, QueueConfig, SearchSpace, detect_rate_changes
from qchar import fit_piecewise, make_burst_schedule, simulate_schedule
from qchar.fitter import departure_series

sched = make_burst_schedule(BurstSpec(6000, 1500, 500_000_000))
drain = Piecewise(((0, 150_000_000), (130_000, 200_000_000)))
emp = PacketTrace.from_sim(simulate_schedule(sched, QueueConfig(1500, drain)), sched.burst_boundaries)

# %%
x, y = departure_series(emp)
rc = detect_rate_changes(x, y, max_changes=2, kind="count", packet_size=1500)
print("change points (us)", [round(c) for c in rc.change_points_us])
print("segment rates (Mb/s)", [round(r / 1e6, 1) for r in rc.segment_rates_bps])

# %%
space = SearchSpace(1200, 1800, 100, 100_000_000, 250_000_000, 25_000_000, max_rate_segments=2)
res = fit_piecewise(emp, space)
print("K", res.capacity, "rates", [r / 1e6 for r in res.rates], "at", res.change_points_us)
