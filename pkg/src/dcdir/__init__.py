"""Cross-domain recommendation of insurance products from knowledge-graph paths
and source-domain behaviour, in plain numpy."""

__version__ = "0.1.0"
