"""Link reconstruction with collaborative inference on graphs.

Modules: ``graph`` (I/O, splitting, augmentation), ``autodiff`` (matrices and
a reverse-mode tape), ``model`` (forward pass and checkpoints), ``training``
(loss, Adam, training loop), ``metrics`` (AUC/AP/precision, heuristics) and
``cli`` (the ``linkrecon`` command).
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = ["__version__"]
