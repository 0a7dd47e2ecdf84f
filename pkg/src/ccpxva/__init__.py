"""XVA and stress analytics for members of central clearing networks."""

__version__ = "0.1.0"
