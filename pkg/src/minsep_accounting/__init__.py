"""Monte Carlo privacy accounting for banded matrix mechanisms under
minimum-separation subsampling."""

from importlib import metadata as _metadata

try:
    __version__ = _metadata.version("artifact")
except _metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from . import accounting, attribution, calibration, sampling, strategy  # noqa: E402,F401
