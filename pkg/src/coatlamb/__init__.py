"""Two-lobe BRDF toolkit for Lambertian bases under rough dielectric coatings."""

__version__ = "0.1.0"
