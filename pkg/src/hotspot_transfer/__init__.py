"""Next-day crime hotspot prediction from mobility flows, with cross-city
transfer learning and a reproducible experiment harness."""

__version__ = "0.1.0"
