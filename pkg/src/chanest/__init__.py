"""OFDM channel-estimation workbench.

Link simulator (baseband + fading channel), classical LS and ideal-MMSE
estimators, and a trainable attention + bidirectional selective-scan
estimator with its own float64 autodiff core.
"""

__version__ = "0.1.0"
