"""Dual-adapter embedding with adaptive chain-of-thought routing, at desk scale."""
