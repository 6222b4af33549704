"""Tests for repository scripts."""
