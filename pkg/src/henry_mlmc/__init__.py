"""Multilevel Monte Carlo for the Henry saltwater intrusion problem with
uncertain porosity, permeability and recharge."""

__version__ = "0.1.0"
