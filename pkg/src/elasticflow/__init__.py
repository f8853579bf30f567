"""Average-velocity-field policy learning with elastic time horizons.

Library layout:

- ``engine``     dense float64 tensors with reverse-mode gradients and
                 forward-mode (dual number) tangent propagation
- ``timeenc``    Gaussian Fourier features for t and the span t - r
- ``network``    conditioned residual-MLP velocity model with AdaLN modulation
- ``flows``      linear noise-data interpolant, time sampling, condition dropout
- ``training``   average-velocity and flow-matching objectives, Adam + EMA loop
- ``oracle``     closed-form marginal velocity fields and identity residuals
- ``sampling``   one-call guided sampling and multi-step Euler integration
- ``tasks``      toy datasets, trajectory metrics, latency benchmark
- ``checkpoint`` binary checkpoint format and strict run configuration
- ``cli``        command-line entry points

Submodules are imported lazily so the command-line front end can configure
thread environment variables before numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "engine",
    "timeenc",
    "network",
    "flows",
    "training",
    "oracle",
    "sampling",
    "tasks",
    "checkpoint",
    "cli",
)


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f"{__name__}.{name}")
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_SUBMODULES))
