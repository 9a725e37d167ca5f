"""Abnormal driving-mode detection from trajectory-prediction errors.

Subpackages and modules:

- ``core``: positions, trajectory windows, reference frames, neighbour selection
- ``sim``: seeded straight-road traffic simulator with mode switches
- ``sensing``: occlusion, sensor noise, V2V message fusion
- ``predict``: constant-velocity baseline and the multi-encoder attention predictor
- ``qcd``: CuSum / MCuSum / GLRT statistics and Monte Carlo FAR/ADD estimators
- ``harness``: end-to-end experiments and sweeps
"""

__version__ = "0.1.0"
