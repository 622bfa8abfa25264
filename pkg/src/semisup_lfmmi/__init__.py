"""Semi-supervised LF-MMI acoustic-model training toolkit."""
