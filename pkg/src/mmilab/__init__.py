"""Discriminative (MMI / MPE) training experiments on a synthetic HMM task."""

__version__ = "0.1.0"
