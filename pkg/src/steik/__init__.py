"""Stabilized eikonal training for SDF neural fields.

Subpackages are imported lazily so that the CLI can pin BLAS thread counts
before NumPy is loaded.
"""

__version__ = "0.1.0"

_SUBMODULES = (
    "fieldnet",
    "jetdiff",
    "losses",
    "sampler",
    "trainer",
    "pdeflow",
    "extract",
    "metrics",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
