"""flowforest: early flow classification with context-dependent random forests."""

__version__ = "0.1.0"
