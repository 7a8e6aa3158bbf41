"""Closed-loop traffic-anomaly harness on a deterministic lane-based micro-world."""

__version__ = "0.1.0"
