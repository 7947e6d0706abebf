"""Modified wave operator toolkit for the Maxwell-Schrodinger system in Coulomb gauge."""

__version__ = "1.0.0"
