"""Sketch portrait generation via decompositional representation learning.

A photo is mapped to a structural sketch and a textural sketch by a
two-branch fully convolutional network, a parsing network assigns
per-pixel face/hair/background probabilities, and the two sketches are
fused into the final portrait guided by those probabilities. Everything
runs on plain numpy arrays with hand-written backward passes; the
convolution hot path is a compiled Cython kernel with a pure-numpy
fallback selected at import.
"""

__version__ = "0.1.0"
