"""Risk-sensitive MPC for mixture-of-experts switched linear systems, solved by majorization-minimization."""

__version__ = "0.1.0"
