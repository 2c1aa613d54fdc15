"""Deterministic randomness, sparse gate weights, and a finite-difference oracle.

Everything here is numpy/float64 and side-effect free so it can be used to
certify the torch training stack without sharing any code with it.
"""

import hashlib
import struct
from dataclasses import dataclass

import numpy as np


def topk_softmax(logits, k):
    """Softmax over ``logits`` followed by top-k truncation, no renormalization.

    Returns a vector of the same length where the k largest softmax
    probabilities are kept verbatim and every other entry is exactly zero.
    Ties are broken toward the lower index. The kept entries therefore sum
    to at most 1 (equal to 1 only when k == len(logits)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"expected 1-d logits, got shape {logits.shape}")
    if not (1 <= k <= logits.size):
        raise ValueError(f"k={k} out of range for {logits.size} logits")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite gate logits")
    shifted = logits - logits.max()
    expd = np.exp(shifted)
    probs = expd / expd.sum()
    # stable sort on -probs keeps the lower index first among ties
    order = np.argsort(-probs, kind="stable")
    out = np.zeros_like(probs)
    keep = order[:k]
    out[keep] = probs[keep]
    return out


def finite_diff_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x`` (float64).

    Evaluates f 2*x.size times; intended for certification, not training.
    """
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(approx, exact, floor=1e-8):
    """|approx - exact| / max(|approx|, |exact|, floor), elementwise max."""
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(approx), np.abs(exact)), floor)
    return float(np.max(np.abs(approx - exact) / denom))


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic and finite-difference gradients."""

    parameter: str
    samples: int
    max_rel_error: float
    max_abs_error: float

    @property
    def ok(self):
        return np.isfinite(self.max_rel_error)


def compare_gradients(f, x, analytic, indices, h=1e-5, name="x", floor=1e-6):
    """Central-difference check of ``analytic`` at the given flat ``indices``.

    ``f`` maps the float64 array ``x`` to a scalar; ``analytic`` is the claimed
    gradient. Only the sampled coordinates are probed, so the cost is
    2*len(indices) evaluations.
    """
    x = np.array(x, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    flat = x.reshape(-1)
    max_rel = 0.0
    max_abs = 0.0
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - analytic[i])
        rel = err / max(abs(fd), abs(analytic[i]), floor)
        max_rel = max(max_rel, rel)
        max_abs = max(max_abs, err)
    return GradCheckReport(parameter=name, samples=len(indices),
                           max_rel_error=max_rel, max_abs_error=max_abs)


def child_seed(seed, index):
    """Stable 64-bit child seed derived from (seed, index) via blake2b."""
    if index < 0:
        raise ValueError("child index must be non-negative")
    digest = hashlib.blake2b(struct.pack("<QQ", seed & 0xFFFFFFFFFFFFFFFF, index),
                             digest_size=8).digest()
    return struct.unpack("<Q", digest)[0]


class SeededRng:
    """Thin wrapper over numpy's Generator with a reproducible child tree.

    Child streams are independent of draw order on the parent: ``child(i)``
    depends only on (seed, i), so inserting extra draws in one component does
    not shift another component's stream.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gen = np.random.default_rng(self.seed)

    def child(self, index):
        return SeededRng(child_seed(self.seed, index))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, seq):
        return seq[int(self._gen.integers(len(seq)))]
