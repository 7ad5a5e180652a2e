"""Bottleneck queue characterization from scheduled UDP probe bursts."""

__version__ = "0.1.0"

from .schedule import (BurstSpec, CampaignGrid, ProbeSchedule, make_burst_schedule, make_campaign,
                       read_schedule, schedule_duration, write_schedule)
from .queue_sim import (ArrivalTrace, CapacityUnit, DropPolicy, FrameGated, Piecewise, QueueConfig, SimTrace,
                        Smooth, arrivals_from_schedule, long_run_rate, simulate, simulate_schedule)
from .trace import PacketTrace, SideTrace, merge_traces
from .analysis import (FlowSeries, cell_stats, detect_rate_changes, fairness_verdict, heatmap,
                       queuing_delay_series, receive_count_series)
from .fitter import FitResult, SearchSpace, fit, fit_piecewise, trace_error

__all__ = [
    "ArrivalTrace", "BurstSpec", "CampaignGrid", "CapacityUnit", "DropPolicy", "FitResult", "FlowSeries",
    "FrameGated", "PacketTrace", "Piecewise", "ProbeSchedule", "QueueConfig", "SearchSpace", "SideTrace",
    "SimTrace", "Smooth", "arrivals_from_schedule", "cell_stats", "detect_rate_changes", "fairness_verdict",
    "fit", "fit_piecewise", "heatmap", "long_run_rate", "make_burst_schedule", "make_campaign",
    "merge_traces", "queuing_delay_series", "read_schedule", "receive_count_series", "schedule_duration",
    "simulate", "simulate_schedule", "trace_error", "write_schedule",
]
