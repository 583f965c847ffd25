"""Force-informed demonstration generation, flow-matching policy and passive rollout."""

__version__ = "0.1.0"
