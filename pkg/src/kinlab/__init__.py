"""kinlab: kinetic-theory limits laboratory."""

__version__ = "0.1.0"
