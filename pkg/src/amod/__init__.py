"""Pricing, rebalancing and fleet sizing for an autonomous ride-hailing fleet."""

__version__ = "0.1.0"
