"""Joint mass-density / photoelectric reconstruction from energy-resolved
attenuation and Compton-scatter data in limited-view X-ray tomography."""

__version__ = "0.1.0"
