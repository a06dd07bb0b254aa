"""Shared test oracles and fixtures.

The finite-difference oracle here is the independent check for every
autodiff gradient: double precision, central differences, step 1e-4.
It only ever calls the forward pass.
"""

import numpy as np


def finite_difference(f, x, h=1e-4):
    """Central-difference gradient of the scalar function f with respect to x.

    f takes no arguments and must read the current contents of x (float64,
    mutated in place one coordinate at a time).
    """
    assert x.dtype == np.float64, "finite differences need float64 inputs"
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(got, want):
    """Max elementwise relative error with a unit floor on the denominator."""
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(got), np.abs(want)))
    return float((np.abs(got - want) / denom).max())


def check_grads_against_fd(loss_fn, leaves, h=1e-4):
    """Backprop loss_fn once, then FD-check every leaf. Returns max rel err.

    loss_fn builds the graph from the leaves' current data and returns the
    scalar loss tensor. Leaves must be float64 with requires_grad=True.
    """
    loss = loss_fn()
    for leaf in leaves:
        leaf.zero_grad()
    loss = loss_fn()
    loss.backward()
    worst = 0.0
    for leaf in leaves:
        fd = finite_difference(lambda: loss_fn().item(), leaf.data, h=h)
        worst = max(worst, max_rel_err(leaf.grad, fd))
    return worst


TINY_VOCAB = [
    "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]",
    "run", "##ning", "shoe", "##s", "add", "milk", "to", "my", "cart",
    "i", "want", "buy", "the", "total", "what", "is", ",", "?", ".",
]


def write_vocab(path, tokens=None):
    tokens = tokens if tokens is not None else TINY_VOCAB
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(tokens) + "\n")
    return path
