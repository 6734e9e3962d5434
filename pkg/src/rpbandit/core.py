"""Shared types, error classes and seeded randomness."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

NORM_SLACK = 1e-9

STREAMS = ("projection", "noise", "posterior", "environment", "policy")


class RPBanditError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(RPBanditError, ValueError):
    pass


class DataError(RPBanditError, ValueError):
    pass


class ConstraintError(DataError):
    pass


class NumericError(RPBanditError, ArithmeticError):
    pass


class EndOfData(RPBanditError):
    """Raised when a replay environment runs out of scheduled users."""


def _stream_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


@dataclass
class Rng:
    """A named, seeded sub-stream.

    Streams with the same ``(seed, stream)`` produce bit-identical draws.
    Different labels are decorrelated through ``SeedSequence`` spawn keys, so
    adding draws to one consumer never shifts another.
    """

    seed: int
    stream: str
    path: tuple = ()
    gen: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidParameterError(f"seed must fit in 64 bits, got {self.seed}")
        key = (_stream_key(self.stream),) + tuple(self.path)
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *path: int | str) -> "Rng":
        """Independent sub-stream addressed by ``path`` (ints or labels)."""
        keys = tuple(_stream_key(p) if isinstance(p, str) else int(p) for p in path)
        return Rng(self.seed, self.stream, self.path + keys)


def make_rng(seed: int, stream: str) -> Rng:
    return Rng(int(seed), stream)


def gaussian_draw(rng: Rng, mean: float, std: float) -> float:
    if not std >= 0:
        raise InvalidParameterError(f"std must be non-negative, got {std}")
    if std == 0:
        return float(mean)
    return float(mean + std * rng.gen.standard_normal())


@dataclass(frozen=True)
class AlgoParams:
    """Hyperparameters of the projected Thompson-sampling policy.

    ``kappa_sq`` defaults to ``1/d``. ``L_z=None`` asks the policy to estimate
    the context-norm bound from its first rounds.
    """

    d: int
    lam: float = 1.0
    delta: float = 0.1
    epsilon: float = 0.1
    kappa_sq: Optional[float] = None
    R: float = 0.5
    L_z: Optional[float] = None
    L_psi: float = 1.0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise InvalidParameterError(f"d must be a positive integer, got {self.d}")
        if not self.lam >= 1:
            raise InvalidParameterError(f"lambda must be >= 1, got {self.lam}")
        if not 0 < self.delta < 1:
            raise InvalidParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if not 0 < self.epsilon < 1:
            raise InvalidParameterError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.kappa_sq is None:
            object.__setattr__(self, "kappa_sq", 1.0 / self.d)
        elif not self.kappa_sq > 0:
            raise InvalidParameterError(f"kappa_sq must be positive, got {self.kappa_sq}")
        if not self.R >= 0:
            raise InvalidParameterError(f"R must be non-negative, got {self.R}")
        if self.L_z is not None and not self.L_z >= 1:
            raise InvalidParameterError(f"L_z must be >= 1, got {self.L_z}")
        if not self.L_psi >= 1:
            raise InvalidParameterError(f"L_psi must be >= 1, got {self.L_psi}")


@dataclass(frozen=True)
class Context:
    x: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class ReducedContext:
    z: np.ndarray


def validate_context(x) -> Context:
    x = np.array(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidParameterError(f"context must be a vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("context has non-finite entries")
    norm = float(np.linalg.norm(x))
    if norm > 1 + NORM_SLACK:
        raise ConstraintError(f"context L2 norm {norm:.6g} exceeds 1")
    x.setflags(write=False)
    return Context(x)


def check_context_block(X: np.ndarray) -> np.ndarray:
    """Vectorised ``validate_context`` over the rows of an (A, n) block."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidParameterError(f"expected a non-empty (arms, n) block, got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("context block has non-finite entries")
    norms = np.sqrt(np.einsum("ij,ij->i", X, X))
    worst = int(np.argmax(norms))
    if norms[worst] > 1 + NORM_SLACK:
        raise ConstraintError(f"context L2 norm {norms[worst]:.6g} of arm {worst} exceeds 1")
    return X


@dataclass(frozen=True)
class RoundOutcome:
    t: int
    chosen_arm: int
    reward: float
    per_round_regret: Optional[float] = None
    step_time: int = 0  # nanoseconds

    def __post_init__(self):
        if not 0.0 <= self.reward <= 1.0:
            raise ConstraintError(f"reward {self.reward} outside [0, 1]")
        if self.per_round_regret is not None and self.per_round_regret < 0:
            raise ConstraintError(f"negative regret {self.per_round_regret}")


def log_term(t: int, L_z: float, lam: float, delta: float) -> float:
    """``log((2 + 2 t L_z^2 / lam) / delta)``, shared by the confidence widths."""
    return math.log((2.0 + 2.0 * t * L_z**2 / lam) / delta)
