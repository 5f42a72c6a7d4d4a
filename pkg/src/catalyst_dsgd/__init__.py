"""Decentralized SGD over gossip networks and its Catalyst-accelerated variant."""

__version__ = "0.1.0"
