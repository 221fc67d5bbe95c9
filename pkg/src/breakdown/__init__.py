"""Breakdown-point analysis of GMM conclusions under non-random missing data."""
