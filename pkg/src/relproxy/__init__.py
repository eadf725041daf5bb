"""Relational proxies on procedurally generated fine-grained corpora."""

__version__ = "0.1.0"
