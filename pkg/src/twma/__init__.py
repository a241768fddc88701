"""Image-induced importance weights for price-trend trading signals."""
from __future__ import annotations

__version__ = "0.1.0"
