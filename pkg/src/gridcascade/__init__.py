"""Tri-layer coordination of smart buildings, microgrids and a distribution network."""
