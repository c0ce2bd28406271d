"""Multi-view BSIF texture classification with per-view CNNs and ensemble fusion."""

__version__ = "0.1.0"
