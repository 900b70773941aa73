"""Compile-time garbage collection toolchain for a small normalized
logic language: structure-sharing analysis, reuse decisions, interface
files, and an instrumented reference interpreter."""

__version__ = "0.1.0"
