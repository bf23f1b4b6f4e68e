"""Item-centric, user-centric and hybrid ranking engine."""

__version__ = "0.1.0"
