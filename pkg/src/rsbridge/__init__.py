"""Schrödinger bridges over regime-switching jump diffusions."""
