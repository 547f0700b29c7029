"""Simulated microservice cluster with a learned tail-latency violation predictor and mitigator."""

__version__ = "0.1.0"
