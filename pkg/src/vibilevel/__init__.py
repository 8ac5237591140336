"""Bilevel optimization with a strongly monotone VI inner level."""
