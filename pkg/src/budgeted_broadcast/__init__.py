"""Budgeted Broadcast: activity-dependent structural pruning for small MLPs."""

__version__ = "0.1.0"
