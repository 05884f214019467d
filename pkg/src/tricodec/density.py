"""Learned fully factorized density model and the rate objective.

Each matrix stream gets its own scalar density: a monotone CDF built
from three composed monotone layers of width 3. Layer weights are kept
positive through a softplus reparameterization; each hidden layer adds
a bounded tanh gating term, which preserves monotonicity. The model of
an integer symbol is the CDF difference across a unit bin, i.e. the
underlying density convolved with a unit uniform.

Initialization is symmetric (zero biases and gates), so p(x) = p(-x)
until training moves the parameters.

The training objective draws fresh uniform noise in (-1/2, 1/2) per
step, evaluates the noisy values under the noise-convolved density, and
charges -log2 of it. Coding uses integer rounding (round-half-to-even)
with a fixed unit bin; there is no learned scale.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .params import ParamBundle

# (name, shape) of one stream's parameters; 28 floats total
DENSITY_FIELDS = (
    ("m0", (3, 1)), ("b0", (3, 1)), ("a0", (3, 1)),
    ("m1", (3, 3)), ("b1", (3, 1)), ("a1", (3, 1)),
    ("m2", (1, 3)), ("b2", (1, 1)),
)
DENSITY_PARAM_COUNT = sum(int(np.prod(s)) for _, s in DENSITY_FIELDS)

INIT_SCALE = 10.0
PMF_FLOOR = 2.0 ** -16
LOSS_FLOOR = 2.0 ** -24
LOG2E = 1.0 / np.log(2.0)


def _softplus64(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def _sigmoid64(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


class FactorizedDensity:
    """One stream's CDF parameters."""

    def __init__(self, bundle=None):
        if bundle is None:
            bundle = ParamBundle()
            scale = INIT_SCALE ** (1.0 / 3.0)
            for name, shape in DENSITY_FIELDS:
                if name.startswith("m"):
                    fan_out = shape[0]
                    init = np.log(np.expm1(1.0 / scale / fan_out))
                    bundle[name] = np.full(shape, init, np.float32)
                else:
                    bundle[name] = np.zeros(shape, np.float32)
        self.bundle = bundle

    def to_array(self):
        """Flat (28,) float32 in the fixed field order (wire format)."""
        return np.concatenate([self.bundle[n].reshape(-1)
                               for n, _ in DENSITY_FIELDS]).astype(np.float32)

    @staticmethod
    def from_array(arr):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.shape != (DENSITY_PARAM_COUNT,):
            raise ContractViolation(
                f"density parameter vector must have {DENSITY_PARAM_COUNT} entries")
        bundle = ParamBundle()
        off = 0
        for name, shape in DENSITY_FIELDS:
            n = int(np.prod(shape))
            bundle[name] = arr[off:off + n].reshape(shape)
            off += n
        return FactorizedDensity(bundle)

    # -- off-tape evaluation (float64, BLAS-free, shared by coder sides) --

    def cdf_np(self, x):
        z = np.asarray(x, dtype=np.float64).reshape(1, -1)
        b = self.bundle
        for i in (0, 1):
            z = np.einsum("ij,jk->ik", _softplus64(b[f"m{i}"]), z) \
                + b[f"b{i}"].astype(np.float64)
            z = z + np.tanh(b[f"a{i}"].astype(np.float64)) * np.tanh(z)
        z = np.einsum("ij,jk->ik", _softplus64(b["m2"]), z) \
            + b["b2"].astype(np.float64)
        return _sigmoid64(z).reshape(np.shape(x))

    def prob_np(self, x):
        """Mass of the unit bin around x (works for integers and reals)."""
        x = np.asarray(x, dtype=np.float64)
        return self.cdf_np(x + 0.5) - self.cdf_np(x - 0.5)

    def bind(self, tape, trainable=True, prefix="density"):
        leaves = self.bundle.bind(tape, trainable=trainable, prefix=prefix)
        return BoundDensity(leaves, prefix), leaves


class BoundDensity:
    """Tape-bound density; evaluates the noisy-bin probability."""

    def __init__(self, leaves, prefix):
        self.leaves = leaves
        self.prefix = prefix

    def _p(self, name):
        return self.leaves[f"{self.prefix}.{name}"]

    def _cdf(self, z):
        # z: Tensor (1, N)
        n = z.shape[1]
        for i in (0, 1):
            w = ad.softplus(self._p(f"m{i}"))
            z = ad.add(ad.matmul(w, z), ad.broadcast(self._p(f"b{i}"), (3, n)))
            gate = ad.broadcast(ad.tanh(self._p(f"a{i}")), (3, n))
            z = ad.add(z, ad.mul(gate, ad.tanh(z)))
        w = ad.softplus(self._p("m2"))
        z = ad.add(ad.matmul(w, z), ad.broadcast(self._p("b2"), (1, n)))
        return ad.sigmoid(z)

    def prob(self, x):
        """x: Tensor (1,N) -> bin mass c(x+1/2) - c(x-1/2), floored."""
        upper = self._cdf(ad.add_const(x, 0.5))
        lower = self._cdf(ad.add_const(x, -0.5))
        return ad.maximum_const(ad.sub(upper, lower), LOSS_FLOOR)


def make_stream_densities(stream_keys):
    """One fresh symmetric model per (plane, scale, rank) stream."""
    return {key: FactorizedDensity() for key in stream_keys}


def bind_densities(densities, tape, trainable=True, prefix="density"):
    bound = {}
    leaves = {}
    for key in sorted(densities):
        k, s, r = key
        p = f"{prefix}.{k}.s{s}.r{r}"
        b, lv = densities[key].bind(tape, trainable=trainable, prefix=p)
        bound[key] = b
        leaves.update(lv)
    return bound, leaves


def make_noise(stream_shapes, rng):
    """Fresh U(-1/2, 1/2) per matrix element, one array per stream."""
    return {key: rng.uniform(-0.5, 0.5, shape).astype(np.float32)
            for key, shape in stream_shapes.items()}


def rate_loss(m_tensors, bound_densities, noises):
    """Total expected code length of the noisy matrices, in bits.

    m_tensors: {stream key -> Tensor (V,V)}; noises: matching constant
    arrays (zeros give the noiseless length). Differentiable w.r.t. the
    matrices and the density parameters.
    """
    total = None
    for key in sorted(m_tensors):
        m = m_tensors[key]
        n = m.size
        flat = ad.reshape(m, (1, n))
        u = np.asarray(noises[key], dtype=np.float32).reshape(1, n)
        noisy = ad.add(flat, ad.Tensor(u))
        p = bound_densities[key].prob(noisy)
        bits = ad.scale(ad.sum_reduce(ad.log(p)), -LOG2E)
        total = bits if total is None else ad.add(total, bits)
    return total


def rate_loss_np(m_arrays, densities):
    """Noiseless code-length estimate (bits) from numpy state."""
    total = 0.0
    for key in sorted(m_arrays):
        p = np.maximum(densities[key].prob_np(m_arrays[key]), LOSS_FLOOR)
        total += float(-(np.log2(p)).sum())
    return total


def quantize_round(m):
    """Round-half-to-even to integers; returns (int32 array, (lo, hi))."""
    m = np.asarray(m)
    if not np.all(np.isfinite(m)):
        raise ContractViolation("quantize_round: non-finite input")
    q = np.rint(m).astype(np.int32)
    return q, (int(q.min()), int(q.max()))


def pmf_table(density, lo, hi, total=1 << 16):
    """Integer frequency table over [lo, hi] summing exactly to ``total``.

    Probabilities are floored at 2^-16 before normalization and every
    entry gets at least one frequency unit; the remainder is distributed
    by largest fractional part (ties to the lower symbol), so both coder
    sides derive the identical table from the identical parameters.
    """
    if hi < lo:
        raise ContractViolation("pmf_table: empty support")
    n = hi - lo + 1
    if n > total // 2:
        raise ContractViolation(f"support of {n} symbols too wide for the coder")
    xs = np.arange(lo, hi + 1, dtype=np.float64)
    p = np.maximum(density.prob_np(xs), PMF_FLOOR)
    raw = p / p.sum() * total
    f = np.maximum(1, np.floor(raw).astype(np.int64))
    diff = total - int(f.sum())
    if diff > 0:
        remainder = raw - np.floor(raw)
        order = np.lexsort((np.arange(n), -remainder))
        f[order[:diff]] += 1
    while diff < 0:
        order = np.lexsort((np.arange(n), -f))
        for i in order:
            if diff == 0:
                break
            if f[i] > 1:
                f[i] -= 1
                diff += 1
    assert f.sum() == total and (f >= 1).all()
    return f


def ideal_code_bits(symbols, freqs, lo, total=1 << 16):
    """Sum of -log2 table probabilities of the symbols."""
    idx = np.asarray(symbols, dtype=np.int64).reshape(-1) - lo
    return float(-np.log2(freqs[idx] / total).sum())
