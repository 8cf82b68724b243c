"""Retinal image grading pipeline: enhancement, features, staging, explanations."""

__version__ = "0.1.0"
