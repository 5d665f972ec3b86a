"""Importance-aware rate allocation for multi-modal feature transmission.

Modules: ``graph`` (DAG models), ``bounds`` (linear bound propagation and
importance), ``fbl`` (finite-blocklength link math), ``quant`` (fixed-point
features), ``ratesolver`` (delay-minimizing rates), ``channel`` (link
simulation), ``pipeline`` (end-to-end trials and sweeps), ``cli``.
"""

__version__ = "0.1.0"
