"""Sharded parameter server runtime."""
