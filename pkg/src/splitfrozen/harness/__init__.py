from .config import ConfigError, ExperimentConfig, load_config, parse_config, preset_text
from .runner import (ExperimentReport, RunError, check_ratios, read_report_csv, run_experiment,
                     run_partition, run_simulate)

__all__ = ["ConfigError", "ExperimentConfig", "ExperimentReport", "RunError", "check_ratios",
           "load_config", "parse_config", "preset_text", "read_report_csv", "run_experiment",
           "run_partition", "run_simulate"]
