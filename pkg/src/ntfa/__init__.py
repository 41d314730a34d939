"""Topographic factor analysis of multi-trial brain-volume time series
with learned participant and stimulus embeddings.

Submodules are imported lazily so the command-line entry point can pin
the numeric thread count before any array library loads.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "analysis",
    "baselines",
    "cli",
    "dataio",
    "diffcore",
    "evaluation",
    "inference",
    "model",
    "persist",
    "synthdata",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
