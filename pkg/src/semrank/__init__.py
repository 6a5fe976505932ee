"""Desk-scale semantic search ranking stack: scoring engine, retrieval, ranking math,
calibration and serving controls."""

__version__ = "0.1.0"
