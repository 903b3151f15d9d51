"""Parameter storage, gradient plumbing, Adam, and plateau LR decay."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from .tensor import (
    NonFiniteError,
    NumericsError,
    ShapeError,
    Tensor,
    backward_graph,
    no_grad,
)

__all__ = [
    "ParamStore",
    "OptimizerState",
    "LrSchedule",
    "GradCheckReport",
    "seeded_init",
    "rng_for",
    "backward",
    "grad_check",
    "adam_step",
    "plateau_update",
    "NonDeterministicLossError",
]


class NonDeterministicLossError(NumericsError):
    """grad_check detected two unequal evaluations of the same loss."""


def rng_for(seed: int, name: str) -> np.random.Generator:
    """An RNG stream keyed by (seed, name).

    Streams depend only on the key, not on creation order, so the same
    parameter name initializes identically across model topologies.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *words])))


def seeded_init(shape: tuple[int, ...], scheme: str, rng: np.random.Generator) -> Tensor:
    """Draw an initial tensor: 'zeros' or 'uniform-fanin' (±1/sqrt(fan_in))."""
    shape = tuple(int(s) for s in shape)
    if any(s <= 0 for s in shape):
        raise ShapeError(f"zero-extent shape {shape}")
    if scheme == "zeros":
        return Tensor(np.zeros(shape))
    if scheme == "uniform-fanin":
        bound = 1.0 / np.sqrt(shape[0])
        return Tensor(rng.uniform(-bound, bound, size=shape))
    raise ValueError(f"unknown init scheme {scheme!r}")


class ParamStore:
    """Named trainable tensors with deterministic, name-keyed initialization."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self._entries: dict[str, Tensor] = {}

    def create(self, name: str, shape: tuple[int, ...], scheme: str = "uniform-fanin") -> Tensor:
        if name in self._entries:
            raise KeyError(f"parameter {name!r} already exists")
        t = seeded_init(shape, scheme, rng_for(self.rng_seed, name))
        t.name = name
        self._entries[name] = t
        return t

    def set(self, name: str, values: np.ndarray) -> None:
        """Replace a parameter's values in place (shape must match)."""
        t = self._entries[name]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != t.data.shape:
            raise ShapeError(f"{name}: cannot assign shape {values.shape} to {t.data.shape}")
        if not np.isfinite(values).all():
            raise NonFiniteError(f"non-finite assignment to {name}")
        t.data = values.copy()

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._entries.items())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._entries.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._entries.items()}


def backward(loss: Tensor, store: ParamStore) -> dict[str, np.ndarray]:
    """Gradient of a recorded scalar loss for every parameter in the store.

    Parameters that did not participate in the forward computation map to
    zero gradients.
    """
    grads = backward_graph(loss)
    out: dict[str, np.ndarray] = {}
    for name, param in store.items():
        g = grads.get(id(param))
        out[name] = g if g is not None else np.zeros_like(param.data)
    return out


@dataclass
class GradCheckReport:
    per_param: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    def worst(self) -> tuple[str, float]:
        name = max(self.per_param, key=self.per_param.get)
        return name, self.per_param[name]


def grad_check(
    loss_fn: Callable[[], Tensor],
    store: ParamStore,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare recorded gradients against central finite differences.

    ``loss_fn`` must be deterministic (dropout disabled); this is verified by
    evaluating the baseline twice. Relative error per parameter entry is
    |g_an - g_fd| / max(1, |g_an|, |g_fd|); the report carries the max per
    parameter name.
    """
    base = loss_fn()
    with no_grad():
        repeat = loss_fn()
    if not np.array_equal(base.data, repeat.data):
        raise NonDeterministicLossError("loss_fn returned different values on two evaluations")
    analytic = backward(base, store)

    report: dict[str, float] = {}
    for name, param in store.items():
        g_an = analytic[name]
        worst = 0.0
        flat = param.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                hi = loss_fn().item()
            flat[i] = orig - eps
            with no_grad():
                lo = loss_fn().item()
            flat[i] = orig
            g_fd = (hi - lo) / (2.0 * eps)
            g = g_an.reshape(-1)[i]
            err = abs(g - g_fd) / max(1.0, abs(g), abs(g_fd))
            if err > worst:
                worst = err
        report[name] = worst
    return GradCheckReport(report)


@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name, plus the step counter and LR."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, store: ParamStore) -> None:
        """Allocate zero moments for any store parameter not yet tracked."""
        for name, param in store.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(param.data)
                self.v[name] = np.zeros_like(param.data)


def adam_step(store: ParamStore, grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    """One Adam update with bias correction; mutates store and opt in place."""
    if set(grads) != set(store.names()):
        missing = set(store.names()) ^ set(grads)
        raise NumericsError(f"gradient names do not match store parameters: {sorted(missing)[:4]}")
    opt.ensure(store)
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, param in store.items():
        g = grads[name]
        if g.shape != param.data.shape:
            raise ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {param.data.shape}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = opt.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + opt.eps)
        if not np.isfinite(update).all():
            raise NonFiniteError(f"non-finite Adam update for {name}")
        param.data = param.data - update


@dataclass
class LrSchedule:
    """Plateau decay: shrink the LR after `patience` non-improving checkpoints."""

    lr: float
    decay_factor: float = 0.9
    patience: int = 6
    best_score: float = -np.inf
    stale_count: int = 0


def plateau_update(sched: LrSchedule, dev_score: float) -> float:
    """Record a dev score (higher is better) and return the possibly-decayed LR."""
    if dev_score > sched.best_score:
        sched.best_score = dev_score
        sched.stale_count = 0
    else:
        sched.stale_count += 1
        if sched.stale_count >= sched.patience:
            sched.lr *= sched.decay_factor
            sched.stale_count = 0
    return sched.lr
