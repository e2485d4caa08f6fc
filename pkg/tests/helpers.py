"""Shared test oracles: central finite differences and error metrics."""

import numpy as np


def numeric_grad(scalar_fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar_fn() w.r.t. `array`.

    scalar_fn must recompute from scratch and read `array` by reference;
    entries are perturbed in place and restored.
    """
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar_fn()
        flat[i] = orig - h
        down = scalar_fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * h)
    return grad


def numeric_grad_at(scalar_fn, array: np.ndarray, flat_indices, h: float = 1e-6) -> np.ndarray:
    """Central differences at selected flat indices only (for big models)."""
    flat = array.reshape(-1)
    out = np.zeros(len(flat_indices))
    for k, i in enumerate(flat_indices):
        orig = flat[i]
        flat[i] = orig + h
        up = scalar_fn()
        flat[i] = orig - h
        down = scalar_fn()
        flat[i] = orig
        out[k] = (up - down) / (2.0 * h)
    return out


def max_rel_err(a, b, floor: float = 1e-4) -> float:
    """max |a-b| / max(|a|, |b|, floor); floor keeps near-zero gradients from
    demanding more resolution than finite differences can deliver."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
