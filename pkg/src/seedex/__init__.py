"""Seed-and-expand retrieval over typed knowledge graphs.

Dense seeding, budgeted K-hop expansion with filtering, a learned expansion
policy over a query-conditioned sparse graph transformer, and the training,
evaluation and theory tooling around them.
"""

__version__ = "0.1.0"
