# %% [markdown]
# # Probe schedules
#
# A burst is a fixed number of equal-size packets paced at a constant rate.
# Gaps are whole microseconds, so the pacing is floored and the real send rate
# is a hair above the nominal one.

# %%
import numpy as np

from qchar import BurstSpec, CampaignGrid, make_burst_schedule, make_campaign, schedule_duration
from qchar.schedule import campaign_packet_count

spec = BurstSpec(6000, 1500, 500_000_000)
sched = make_burst_schedule(spec)
print("gap", spec.gap_us, "us; burst lasts", schedule_duration(sched), "us")

# %%
offsets = np.asarray(sched.send_offsets_us())
achieved = 1500 * 8 * (len(offsets) - 1) / (offsets[-1] * 1e-6)
print(f"achieved rate {achieved / 1e6:.2f} Mb/s vs nominal 500")

# %% [markdown]
# The default campaign crosses 12 burst sizes with 10 send rates and puts a
# guard gap between bursts so the queue drains before the next one.

# %%
grid = CampaignGrid()
camp = make_campaign(grid)
print(len(grid), "cells,", campaign_packet_count(grid), "packets,", len(camp.burst_boundaries), "bursts")
print("campaign length", schedule_duration(camp) / 1e6, "s")
