"""Born-approximation scattering workbench for potentials conormal to nested submanifolds."""

__version__ = "0.1.0"
