"""Desk-scale simulation of a phone-based distributed ambient temperature
measurement pipeline: per-phone (value, uncertainty) estimators, learned and
classical truth inference over crowdsourced answers, automatic label
generation, few-shot meta-learning, and federated meta-training with
additively homomorphic gradient aggregation."""

__version__ = "0.1.0"
