"""Two-stage human novel pose and view synthesis at desk scale."""

__version__ = "0.1.0"
