"""Mean-field-game travel-time tomography: forward HJB-FPK solver, observation channels and two-stage inversion."""

__version__ = "0.1.0"
