"""
edgebench - train, prune, quantize, export and benchmark small CNNs for edge inference.

The engine is plain Python + numpy; the Django app in ``pipeline`` wraps it
with settings, logging and management commands.
"""

__version__ = "0.1.0"
