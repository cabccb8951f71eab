"""Sampling, data, training and inference around the decoder."""
