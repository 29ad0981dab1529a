"""Model-based policy search with probabilistic dynamics models.

The package learns probabilistic models of environment dynamics (exact GP,
nonstationary GP with network-predicted local kernels, ensembles of
probabilistic neural networks), propagates state uncertainty through the
learned model either by density approximation or by trajectory sampling,
and optimizes a bounded RBF policy by gradient ascent on the expected
cumulative reward.
"""

import jax

# Double precision everywhere by default; callers opt into float32 where the
# extra speed matters and the accuracy does not.
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
