"""Dense numeric kernels with exact gradients.

The hot kernels come from the compiled ``_kernels`` extension when it is
available and from ``_fallback`` (numpy) otherwise.  ``DPSM_BACKEND=numpy``
forces the fallback.
"""

import importlib
import os

from .layers import (  # noqa: F401
    ACTIVATIONS,
    EmbeddedSequence,
    Parameter,
    activate,
    activate_grad,
    check_finite,
    conv_ngram,
    conv_ngram_backward,
    dense_affine,
    dense_affine_backward,
    embed_sequence,
    embed_sequence_backward,
    grad_check,
    maxpool_time,
    maxpool_time_backward,
)


def available_backends():
    names = ["numpy"]
    try:
        importlib.import_module("._kernels", __name__)
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython"/"numpy"), default: best available."""
    if name is None:
        name = os.environ.get("DPSM_BACKEND") or available_backends()[0]
    if name == "cython":
        return importlib.import_module("._kernels", __name__)
    if name == "numpy":
        return importlib.import_module("._fallback", __name__)
    raise ValueError(f"unknown kernel backend {name!r}")


kernels = get_backend()
BACKEND = kernels.NAME
