"""duorch: a runtime that runs hybrid quantum-classical workflows next to the
deployment of the environment they need."""

__version__ = "0.1.0"
