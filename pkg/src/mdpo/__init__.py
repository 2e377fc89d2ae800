"""Decentralized multi-agent RL lab: latent-variable model-based policy
optimization, its no-prediction ablation, and an independent PPO baseline,
with tabular and particle environments and reproducible diagnostics."""

__version__ = "0.1.0"
