"""Test package for ICL Forge."""
