"""Dual-branch decoupled point cloud registration, built on a minimal
reverse-mode autodiff substrate."""

__version__ = "0.1.0"
