"""Synthetic ECG telemetry stack: signal generator, emulated sensor nodes,
binary wire protocol, ingestion and storage, streaming analysis, alerting."""

__version__ = "0.1.0"
