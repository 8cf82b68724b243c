"""HTTP service exposing the grading pipeline."""
