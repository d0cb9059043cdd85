"""Minimal numpy autodiff, the two-branch descriptor network and its training loop."""
