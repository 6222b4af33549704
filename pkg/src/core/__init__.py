"""Core pipeline: traffic parsing, features, training, compilation, simulation."""
