"""Test suite for flowforest."""
