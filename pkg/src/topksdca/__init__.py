"""Top-k and multilabel loss functions trained with stochastic dual coordinate ascent."""

__version__ = "0.1.0"
