"""Shared test helpers."""

from __future__ import annotations

import numpy as np

from deskst.numerics import ParamStore, grad_check


def store_with(seed: int = 0, **arrays: np.ndarray) -> ParamStore:
    """Build a ParamStore holding the given named arrays."""
    store = ParamStore(seed)
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=np.float64)
        store.create(name, arr.shape, "zeros")
        store.set(name, arr)
    return store


def check_grads(loss_fn, store: ParamStore, tol: float = 1e-4, eps: float = 1e-5) -> float:
    """Run grad_check and assert the max relative error is within tol."""
    report = grad_check(loss_fn, store, eps=eps)
    err = report.max_rel_error
    assert err <= tol, f"gradient mismatch: {report.worst()}"
    return err
