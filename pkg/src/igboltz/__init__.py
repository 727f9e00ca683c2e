"""Information geometry of binary distributions and Boltzmann-machine trainers."""

__version__ = "0.1.0"
