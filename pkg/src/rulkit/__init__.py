"""Remaining-useful-life estimation on C-MAPSS turbofan data.

Sliding-window RUL regression with LSTM/CNN baselines and attention-fused
multi-block models, plus the training and evaluation protocol around them.
"""

__version__ = "0.1.0"
