"""Low-carbon demand management toolkit for radial distribution networks.

Core stack: DistFlow second-order-cone dispatch with locational prices,
carbon emission flow attribution, a flexible-load multi-agent environment,
and constrained policy-optimization trainers with networked consensus.
"""

__version__ = "0.1.0"
