"""Neural-network training with weights kept as low-rank factorizations.

Layers hold U, S, V factors that are advanced by a three-pass integrator
with rank-adaptive truncation, so training cost and storage track the
current ranks instead of the dense layer sizes.
"""

__version__ = "0.1.0"
