"""All-MLP sequential recommendation with a small autodiff core."""

__version__ = "0.1.0"
