"""Software twin of an optical-waveguide membrane that senses its own shape."""

__version__ = "0.1.0"
