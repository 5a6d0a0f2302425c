"""Exact bound verification and PPO/DML training on rendered tabular MDPs."""
__version__ = "0.1.0"
