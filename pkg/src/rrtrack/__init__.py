"""Recurrent regression tracking toolkit.

A self-contained generic-object tracker: a crop-pair convolutional
embedding with skip connections, a two-layer peephole LSTM regressing
box corners, a curriculum trainer with scheduled self-crops, a synthetic
sequence generator, a streaming tracker with periodic state reset, and
an evaluation harness. Everything runs on numpy; no GPU, no datasets.
"""

__version__ = "0.1.0"
