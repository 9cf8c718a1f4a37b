"""Deterministic hex-grid EV taxi fleet simulator with a hierarchical
meta-RL dispatch stack (central coordinator, per-region graph-attention
agents with latent task inference, and a rule-based operational layer).
"""

__version__ = "0.1.0"
