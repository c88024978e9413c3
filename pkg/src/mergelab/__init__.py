"""Model merging with task-specific representation interventions, built on a small numpy autodiff core."""

__version__ = "0.1.0"
