"""Ricci-flow-guided autoencoders for learning time-dependent PDE solution operators."""
import jax

# geometry oracles need double precision throughout
jax.config.update("jax_enable_x64", True)

__version__ = "0.1.0"
