"""Unsupervised anomaly detection for multivariate time series.

A transformer autoencoder is trained by masked reconstruction on normal-only
windows; anomalies are flagged by the reconstruction error of unseen windows.
Includes the full preprocessing, training, scoring, and evaluation stack plus
a CLI (``mvts``).
"""

__version__ = "0.1.0"
