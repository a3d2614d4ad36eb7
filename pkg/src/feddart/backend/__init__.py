"""Workflow backend: selector, aggregator tree, transport."""
