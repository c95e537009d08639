"""Tabular workbench for state-aware proximal pessimism in offline RL."""

__version__ = "0.1.0"
