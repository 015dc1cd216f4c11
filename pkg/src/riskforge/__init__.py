"""Knowledge-enhanced ASCVD risk modelling for T2DM cohorts from EHR tables."""

__version__ = "0.1.0"
