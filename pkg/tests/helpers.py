"""Shared test oracles, independent of the code paths they check."""

import numpy as np

from tricodec import autodiff as ad


def finite_diff_grad(fn, arrays, wrt, eps=1e-3):
    """Central finite differences of a scalar function of numpy arrays.

    ``fn(*arrays) -> float`` is evaluated in float64; ``wrt`` is the
    index of the argument to differentiate. Kept deliberately naive so
    it stays an independent oracle for the tape engine.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    x = arrays[wrt]
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn(*arrays)
        flat[i] = orig - eps
        fm = fn(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def rel_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / denom


def check_grad(build, arrays, wrt=0, eps=1e-3, tol=1e-4):
    """Compare tape backward against finite differences on float64 tapes.

    ``build(*tensors) -> scalar Tensor`` constructs the computation from
    leaf tensors. Returns the relative error.
    """
    def scalar_fn(*arrs):
        tape = ad.Tape(dtype=np.float64)
        leaves = [tape.leaf(a) for a in arrs]
        return build(*leaves).item()

    fd = finite_diff_grad(scalar_fn, arrays, wrt, eps=eps)

    tape = ad.Tape(dtype=np.float64)
    leaves = [tape.leaf(np.asarray(a, dtype=np.float64)) for a in arrays]
    loss = build(*leaves)
    grads = tape.backward(loss)
    an = grads[leaves[wrt].node_id]
    err = rel_error(an, fd)
    assert err <= tol, f"gradient mismatch: rel err {err:.3e} > {tol:.1e}"
    return err
