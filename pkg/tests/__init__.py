"""Test package for latentprog."""
