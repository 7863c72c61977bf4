"""Command-line experiment runner: datasets, experiments, CSV output."""
