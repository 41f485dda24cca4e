"""Query-by-example spoken term detection toolkit."""

__version__ = "0.1.0"
