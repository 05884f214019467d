"""Parameter-efficient finetuning state.

Triplane deltas are rank-R sums of (per-scale channel vector) x
(per-plane spatial matrix) outer products; the vector is shared by the
three planes of a scale. Vectors start at zero and matrices at small
random values, so the materialized delta is exactly zero at
initialization and composing it with a frozen base is a bitwise no-op.

Decoder adapters are LoRA-style low-rank updates w_a @ w_b added to
every frozen linear layer of both MLP heads; w_a starts at zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .params import ParamBundle
from .renderer import BoundMlp, RadianceMlp
from .triplane import PLANE_KEYS

M_INIT_STD = 0.02
LORA_INIT_STD = 0.02


class DeltaFactors:
    """Low-rank triplane finetuning factors over a TriplaneConfig."""

    def __init__(self, tri_config, rank, bundle):
        self.tri_config = tri_config
        self.rank = rank
        self.bundle = bundle

    @staticmethod
    def m_name(k, s, r):
        return f"m.{k}.s{s}.r{r}"

    @staticmethod
    def v_name(s, r):
        return f"v.s{s}.r{r}"

    def stream_keys(self):
        """Canonical (plane, scale, rank) order of the matrix streams."""
        return [(k, s, r) for k in PLANE_KEYS
                for s in range(1, self.tri_config.n_scales + 1)
                for r in range(self.rank)]

    def matrix(self, k, s, r):
        return self.bundle[self.m_name(k, s, r)]

    def vector(self, s, r):
        return self.bundle[self.v_name(s, r)]

    def set_matrix(self, k, s, r, value):
        self.bundle[self.m_name(k, s, r)] = value

    def m_byte_size(self):
        return 4 * self.rank * 3 * sum(v * v for v in self.tri_config.resolutions)

    def v_byte_size(self):
        return 4 * self.rank * self.tri_config.n_scales * self.tri_config.channels

    def materialize_np(self, key):
        """Dense (C,Vs,Vs) delta for one plane, in numpy."""
        k, s = key
        out = None
        for r in range(self.rank):
            term = (self.vector(s, r)[:, None, None]
                    * self.matrix(k, s, r)[None, :, :])
            out = term if out is None else out + term
        return out.astype(np.float32)

    def bind(self, tape, trainable=True, prefix="delta"):
        leaves = self.bundle.bind(tape, trainable=trainable, prefix=prefix)
        return BoundDelta(self, leaves, prefix), leaves


class BoundDelta:
    """Tape-bound factors; materializes per-plane deltas on demand."""

    def __init__(self, factors, leaves, prefix):
        self.factors = factors
        self.leaves = leaves
        self.prefix = prefix

    def _leaf(self, name):
        return self.leaves[f"{self.prefix}.{name}"]

    def materialize(self, key):
        k, s = key
        cfg = self.factors.tri_config
        c = cfg.channels
        v = cfg.resolutions[s - 1]
        out = None
        for r in range(self.factors.rank):
            vec = self._leaf(DeltaFactors.v_name(s, r))
            mat = self._leaf(DeltaFactors.m_name(k, s, r))
            term = ad.mul(ad.broadcast(ad.reshape(vec, (c, 1, 1)), (c, v, v)),
                          ad.broadcast(ad.reshape(mat, (1, v, v)), (c, v, v)))
            out = term if out is None else ad.add(out, term)
        return out


def init_delta(tri_config, rank=1, seed=0):
    """Matrices ~ N(0, 0.02^2), vectors zero: the delta starts exactly zero."""
    if rank < 1:
        raise ContractViolation("delta rank must be >= 1")
    rng = np.random.default_rng(seed)
    bundle = ParamBundle()
    for s in range(1, tri_config.n_scales + 1):
        v = tri_config.resolutions[s - 1]
        for r in range(rank):
            bundle[DeltaFactors.v_name(s, r)] = np.zeros(
                tri_config.channels, np.float32)
    for k in PLANE_KEYS:
        for s in range(1, tri_config.n_scales + 1):
            v = tri_config.resolutions[s - 1]
            for r in range(rank):
                bundle[DeltaFactors.m_name(k, s, r)] = (
                    M_INIT_STD * rng.standard_normal((v, v))).astype(np.float32)
    return DeltaFactors(tri_config, rank, bundle)


def materialize_delta(factors, k, s):
    """Dense (C,Vs,Vs) numpy delta for plane k at scale s."""
    return factors.materialize_np((k, s))


# ---------------------------------------------------------------------------
# LoRA adapters for the decoder MLPs


class AdaptedMlp:
    """A frozen RadianceMlp plus trainable low-rank weight updates."""

    def __init__(self, base, rank, adapters):
        self.base = base
        self.rank = rank
        self.adapters = adapters

    # renderer duck-typing: expose the base architecture
    @property
    def spec(self):
        return self.base

    @property
    def params(self):
        return self.base.params

    def effective_params(self):
        """Dense numpy weights with the adapter update applied."""
        out = {}
        for name, din, dout in self.base.layer_dims:
            wa = self.adapters[f"{name}.wa"]
            wb = self.adapters[f"{name}.wb"]
            out[f"{name}.w"] = self.base.params[f"{name}.w"] + wa @ wb
            out[f"{name}.b"] = self.base.params[f"{name}.b"].copy()
        return out

    def as_bound(self):
        """Off-tape bound view for plain rendering."""
        eff = self.effective_params()
        return BoundMlp(self.base, {k: ad.Tensor(v) for k, v in eff.items()})

    def bind(self, tape, trainable=True, prefix="mlp"):
        """Bind base frozen + adapters; effective W = W + wa @ wb."""
        tensors = {}
        leaves = {}
        for name, arr in sorted(self.base.params.items()):
            t = tape.leaf(arr, frozen=True)
            leaves[f"{prefix}.base.{name}"] = t
            tensors[name] = t
        for name, din, dout in self.base.layer_dims:
            wa = tape.leaf(self.adapters[f"{name}.wa"], frozen=not trainable)
            wb = tape.leaf(self.adapters[f"{name}.wb"], frozen=not trainable)
            leaves[f"{prefix}.lora.{name}.wa"] = wa
            leaves[f"{prefix}.lora.{name}.wb"] = wb
            tensors[f"{name}.w"] = ad.add(tensors[f"{name}.w"],
                                          ad.matmul(wa, wb))
        return BoundMlp(self.base, tensors), leaves


def wrap_mlp(mlp, rank=4, seed=0):
    """Attach rank-r adapters to every linear layer (heads included).

    w_a = 0 and w_b ~ N(0, 0.02^2), so the wrapped decoder is bitwise
    identical to the base until training moves w_a. Biases stay frozen
    and un-adapted.
    """
    if rank < 1:
        raise ContractViolation("adapter rank must be >= 1")
    if isinstance(mlp, AdaptedMlp):
        raise ContractViolation("decoder is already wrapped")
    rng = np.random.default_rng(seed)
    adapters = ParamBundle()
    for name, din, dout in mlp.layer_dims:
        adapters[f"{name}.wa"] = np.zeros((dout, rank), np.float32)
        adapters[f"{name}.wb"] = (LORA_INIT_STD
                                  * rng.standard_normal((rank, din))).astype(np.float32)
    return AdaptedMlp(mlp, rank, adapters)


def adapter_byte_size(mlp, rank):
    """Raw 32-bit payload of one decoder head's adapters."""
    return 4 * rank * sum(din + dout for _, din, dout in mlp.layer_dims)


def plane_byte_size(tri_config):
    """Raw 32-bit payload of all nine dense planes."""
    return 4 * 3 * tri_config.channels * sum(
        v * v for v in tri_config.resolutions)


# ---------------------------------------------------------------------------
# finetune-mode parameter policy

FINETUNE_MODES = ("wo-ft", "full-ft", "peft", "peft++")


def trainable_prefixes(mode):
    """Parameter-name prefixes that train in each finetuning mode.

    The encoder, compression CNNs, and codebook never appear: they stay
    frozen in every finetuning mode.
    """
    if mode == "wo-ft":
        return frozenset()
    if mode == "full-ft":
        return frozenset({"planes.", "mlp.coarse.base.", "mlp.fine.base."})
    if mode in ("peft", "peft++"):
        return frozenset({"delta.", "mlp.coarse.lora.", "mlp.fine.lora."})
    raise ContractViolation(f"unknown finetune mode {mode!r}")
