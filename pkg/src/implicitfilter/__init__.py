"""implicitfilter - Implicit particle filters for data assimilation of Ito SDEs."""

__version__ = "0.1.0"
__app_name__ = "implicitfilter"
