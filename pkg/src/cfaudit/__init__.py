"""Deterministic desk-scale model of a two-world MCU whose applications
are rewritten to report control flow to an isolated audit engine, plus the
remote verifier that replays the evidence against the program's graph."""

__version__ = "0.1.0"
