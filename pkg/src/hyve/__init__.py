"""Wavelength-aware 2D convolutions for hyperspectral imaging.

Subpackages:
  autodiff - minimal float64 reverse-mode autodiff engine
  wroi     - learnable Gaussian wavelength ranges and kernel synthesis
  nets     - shallow classifier with a swappable first layer
  camera   - camera descriptors, synthetic scenes, cube I/O, baselines
  train    - Adam, metrics, training loop, experiment runners
  cli      - command-line surface (gen-data / train / eval / export-filters / sweep)
"""

from . import autodiff, camera, nets, train, wroi  # noqa: F401

__version__ = "0.1.0"
