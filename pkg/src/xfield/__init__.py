"""xfield: sparse-view X-ray tomography with a neural radiodensity field.

A numpy library covering the full experiment loop at desk scale:
procedural phantoms, cone-beam projection simulation, a hash-encoded
segmented-attention field, exponential-attenuation rendering, masked
local-global ray sampling, Adam training, and NVS/CT evaluation.
"""

__version__ = "0.1.0"

_LAZY = ("Tensor", "Tape")


def __getattr__(name):
    # Deferred so the CLI can apply XFE_THREADS before numpy loads.
    if name in _LAZY:
        from . import tensor

        return getattr(tensor, name)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(list(globals()) + list(_LAZY))
