"""Shuffling recurrent networks and a vanilla RNN baseline in numpy, with tasks, optimizers and diagnostics."""

__version__ = "0.1.0"
