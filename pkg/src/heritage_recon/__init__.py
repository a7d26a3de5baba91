"""Neural reconstruction of buildings from mixed gray-scale and color photo collections."""

__version__ = "0.1.0"
