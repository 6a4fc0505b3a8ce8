"""Constructive checks of the relation-tracing and frontier-coverage results."""
