"""Trace-driven ABR streaming lab: simulators, QoE metrics, channel models, training and serving."""

__version__ = "0.1.0"
