"""Multi-mode continual learning lab: MOTA, baselines, metrics and landscapes."""

__version__ = "0.1.0"
