"""Lightweight feature and model pruning for CTR models.

Three phases: gate pretraining on a small subset, structural pruning of
features and model with weight transfer, and continued training of the
compact model.
"""

__version__ = "0.1.0"
