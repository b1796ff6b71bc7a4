"""Linear stability of phototactic bioconvection in a rotating, forward-scattering suspension."""

__version__ = "0.1.0"
