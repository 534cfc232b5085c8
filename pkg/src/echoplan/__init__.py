"""Echo planning: a sparse-token BEV planner trained with a current-future-current cycle."""

__version__ = "0.1.0"
