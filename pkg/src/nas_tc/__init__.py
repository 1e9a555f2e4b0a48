"""NAS-TC: differentiable search over temporal convolutions and the
stacked temporal-cell classifier it produces."""

__version__ = "0.1.0"
