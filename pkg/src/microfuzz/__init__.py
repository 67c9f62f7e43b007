"""Microcode-coverage-guided CPU fuzzing on a deterministic simulator."""

__version__ = "0.1.0"
