"""Configs, campaigns and policy comparison."""
