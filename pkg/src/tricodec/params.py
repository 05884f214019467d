"""Flat named-parameter bundles shared by the network modules.

Parameters are stored as plain float32 arrays keyed by name. Each
training step binds them onto a fresh tape (frozen or trainable) and
the optimizer writes updates back into the arrays by name.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


class ParamBundle:
    def __init__(self, arrays=None):
        self.arrays = dict(arrays or {})

    def __contains__(self, name):
        return name in self.arrays

    def __getitem__(self, name):
        return self.arrays[name]

    def __setitem__(self, name, value):
        self.arrays[name] = np.ascontiguousarray(value, dtype=np.float32)

    def names(self):
        return sorted(self.arrays)

    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def bind(self, tape, trainable=False, prefix=""):
        """Register every array as a leaf; returns {full name -> Tensor}."""
        out = {}
        for name in self.names():
            full = f"{prefix}.{name}" if prefix else name
            out[full] = tape.leaf(self.arrays[name], frozen=not trainable)
        return out

    def copy(self):
        return ParamBundle({k: v.copy() for k, v in self.arrays.items()})

    def byte_size(self):
        return 4 * self.n_params()


class BoundParams:
    """Tensor view of a bundle with a local-name accessor."""

    def __init__(self, tensors, prefix=""):
        self.tensors = tensors
        self.prefix = prefix

    def __getitem__(self, name):
        full = f"{self.prefix}.{name}" if self.prefix else name
        t = self.tensors.get(full)
        if t is None:
            raise ContractViolation(f"unbound parameter {full!r}")
        return t


def bind_bundle(bundle, tape, trainable=False, prefix=""):
    tensors = bundle.bind(tape, trainable=trainable, prefix=prefix)
    return BoundParams(tensors, prefix=prefix), tensors
