"""Constructive minimum-width universal approximation with squashable activations."""
