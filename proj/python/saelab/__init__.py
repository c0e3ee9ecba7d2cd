"""Sparse autoencoder analysis of clinical sequence models."""

from ._core import *  # noqa: F401,F403
from ._core import Error, ConfigError, MissingPrerequisite, NumericalError, FormatError, __version__

__all__ = [name for name in dir() if not name.startswith("_")] + ["__version__"]
