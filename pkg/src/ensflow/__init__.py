"""Post-processing of ensemble temperature forecasts with a shared dense network
and interchangeable distribution heads (normal, spline flow, Bernstein quantiles)."""

__version__ = "0.1.0"
