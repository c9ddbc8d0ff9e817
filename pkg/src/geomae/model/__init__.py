"""Masked autoencoder over voxel tokens, with its own differentiation engine."""
