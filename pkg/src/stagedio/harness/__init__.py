"""Workload generation, fault injection, oracle comparison and benchmarks."""

from .crash import crash_drill, inject_crash
from .descriptor import CrashPlan, JobDescriptor, Metrics, random_descriptor
from .oracle import compare_oracle, replay
from .runner import Job, run_job
from .trace import generate_trace

__all__ = [
    "CrashPlan",
    "Job",
    "JobDescriptor",
    "Metrics",
    "compare_oracle",
    "crash_drill",
    "generate_trace",
    "inject_crash",
    "random_descriptor",
    "replay",
    "run_job",
]
