"""Diabetic retinopathy staging from fundus images."""

__version__ = "0.1.0"
