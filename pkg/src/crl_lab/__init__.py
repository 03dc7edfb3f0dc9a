"""crl-lab: a numerical laboratory for identifiability in causal
representation learning.

Subpackages cover structural causal models, invertible mixings, the IMA and
IGCI contrasts, spurious-solution constructions (Darmois, rotated-Gaussian
automorphisms), identifiability metrics, a small trainable flow, the
multi-view and multi-environment experiments, and mechanism-shift causal
discovery.
"""

__version__ = "0.1.0"
