"""Data generation, configs, traces, and the CLI.

Only the trace primitives load eagerly: the algorithm modules import them,
so pulling in config/run here would close an import cycle. Everything else
resolves on first attribute access.
"""

from .trace import SCALAR_BYTES, Trace, TraceRecord, bytes_per_round

_LAZY = {
    "CertifyOptions": "config",
    "ConfigError": "config",
    "ExperimentConfig": "config",
    "ProblemSpec": "config",
    "dump_config": "config",
    "load_config": "config",
    "parse_config": "config",
    "save_config": "config",
    "ExperimentResult": "run",
    "SeedResult": "run",
    "build_problem": "run",
    "run_experiment": "run",
    "SyntheticDataset": "synthetic",
    "UserData": "synthetic",
    "gen_synthetic": "synthetic",
    "load_dataset": "synthetic",
}

__all__ = ["SCALAR_BYTES", "Trace", "TraceRecord", "bytes_per_round",
           *sorted(_LAZY)]


def __getattr__(name: str):
    try:
        modname = _LAZY[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
    from importlib import import_module
    return getattr(import_module(f".{modname}", __name__), name)
