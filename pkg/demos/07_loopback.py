# %% [markdown]
# # Loopback sanity check
#
# Send a burst to a receiver on 127.0.0.1 and merge both sides. There is no
# bottleneck, so nothing should be lost and OWD should stay well under a
# millisecond. Pacing error shows how well the host keeps the schedule.

# %%
from qchar import BurstSpec, make_burst_schedule
from qchar.wire_prober import loopback_selftest

rep = loopback_selftest(make_burst_schedule(BurstSpec(2000, 1500, 48_000_000)))
for line in rep.lines():
    print(line)
