"""Unsupervised stress stratification of RR-interval (RRI) time series.

The pipeline: parse and clean raw RRI recordings, cut them into
non-overlapping 30-beat windows, compute classical HRV features,
train small convolutional / LSTM autoencoders from scratch to embed
each window into a 2D latent space, cluster the latents with DBSCAN,
label held-out windows with KNN, and interpret the two clusters via
physiological stress markers (RMSSD, Max-HR, Mean-RR, LF/HF) with
Welch t-tests.
"""

__version__ = "0.1.0"
