"""Projected Wasserstein gradient descent for high-dimensional Bayesian inference.

Submodules:

* :mod:`pwgd.models`: priors, the linear PDE inverse problem, 2-D toys and
  closed-form oracles.
* :mod:`pwgd.kde`: kernels, bandwidths and KDE scores.
* :mod:`pwgd.projection`: gradient-informed subspaces and coordinate maps.
* :mod:`pwgd.samplers`: Langevin, WGD, SVGD and projected WGD.
* :mod:`pwgd.diagnostics`: accuracy metrics, KL-bound and profile-ratio reports.
* :mod:`pwgd.cli`: the ``pwgd`` command.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"
