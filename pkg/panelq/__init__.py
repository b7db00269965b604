__version__ = "0.1.0"

__all__ = [
    "cli",
    "config",
    "covariance",
    "dgp",
    "errors",
    "md_estimator",
    "panel_io",
    "qr_core",
    "reporting",
    "simulation",
]
