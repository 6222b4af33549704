"""CLI command modules for flowforest."""
