"""Experiment driver: configs, episodes, metrics and the CLI."""
