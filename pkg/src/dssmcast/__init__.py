"""Grid cellular-traffic forecasting with attention encoders and differentiable Kalman filters.

Modules
-------
ndiff       reverse-mode automatic differentiation on numpy arrays
ingest      CDR parsing, hourly aggregation, features, windows, splits, synthetic data
encoder     per-timestep CNN + self-attention + observation/exogenous heads
ssm         diagonal linear / extended Kalman filter scans (compiled core or numpy)
model       full forecaster, checkpoints
train       RMSE loss, Adam, early stopping, sweeps
evaluation  metrics, baselines, prediction export (also importable as ``dssmcast.eval``)
cli         command-line interface
"""

__version__ = "0.1.0"

from ._core import BACKEND  # noqa: E402

__all__ = ["BACKEND", "__version__"]
