"""Decompilation-assistant toolkit: context selection, variable tracing,
prompt construction, model orchestration, benchmarking, and data tooling
for binary reverse engineering."""

__version__ = "0.1.0"
