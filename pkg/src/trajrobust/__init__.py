"""Adversarial robustness benchmark for offline trajectory-learning policies.

Synthetic intersection data, three policies (BC-MLP, BC-Transformer and a
GAIL-style IRL policy) trained with a small reverse-mode autodiff engine,
FGSM/PGD attacks on the structured state, and ADE/FDE robustness reports.
"""

__version__ = "0.1.0"
