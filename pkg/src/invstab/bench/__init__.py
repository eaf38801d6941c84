"""Benchmark orchestration: configuration, pipeline and report emission."""

from invstab.bench.config import BenchConfig, load_config
from invstab.bench.runner import BenchResult, emit_report, grid_search_alpha, run_benchmark

__all__ = ["BenchConfig", "BenchResult", "emit_report", "grid_search_alpha", "load_config", "run_benchmark"]
