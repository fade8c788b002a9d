"""Behaviour-policy optimization lab: variance-reduced off-policy collection
for policy-gradient agents, with an exact tabular oracle."""

__version__ = "0.1.0"
