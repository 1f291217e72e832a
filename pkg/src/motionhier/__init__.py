"""Desk-scale hierarchical imitation learning with language-motion action
hierarchies: simulated demonstrations, automatic motion labeling, tokenized
policies, asynchronous rollouts with live corrections, and retraining from
those corrections."""

__version__ = "0.1.0"
