"""Single-image rain removal with quasi-sparsity priors.

Submodules:

``imaging``     image I/O, derivative filter bank, PSNR / SSIM
``sparsity``    log-histogram chord test and Laplacian (mixture) fits
``rain``        synthetic rain streaks and paired datasets
``network``     the shuffle-unit deraining network
``losses``      quasi-sparsity, content, detail and auxiliary losses
``training``    optimisation loop, ablation and feature-sharing study
``evaluation``  scoring, per-scale study, output sparsity, latency
``cli``         the ``qsderain`` command
"""
from ._accel import HAVE_NUMBA, USE_NUMBA

__version__ = "0.1.0"

__all__ = ["HAVE_NUMBA", "USE_NUMBA", "__version__"]
