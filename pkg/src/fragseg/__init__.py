"""Instance discovery from classification signals: seed, cluster, select."""

__version__ = "0.1.0"
