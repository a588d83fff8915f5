"""Desk-scale RCoNet: deformable MI maximization, mixed high-order moments and
multi-expert uncertainty on a small float64 autodiff engine."""

__version__ = "0.1.0"
