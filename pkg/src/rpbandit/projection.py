"""Gaussian random projection and its inner-product concentration checks."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Context, InvalidParameterError, ReducedContext, Rng, DataError

_MAGIC = b"RPPROJ01"
_HEADER = struct.Struct("<8sII")

# Bound on floats materialised per chunk in the distortion probe.
_CHUNK_FLOATS = 4_000_000


@dataclass(frozen=True)
class ProjectionMatrix:
    entries: np.ndarray
    kappa_sq: Optional[float] = None
    seed: Optional[int] = None

    @property
    def d(self) -> int:
        return self.entries.shape[0]

    @property
    def n(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_entries(cls, entries) -> "ProjectionMatrix":
        """Wrap explicit entries. Intended for tests and pinned experiments."""
        P = np.array(entries, dtype=np.float64)
        if P.ndim != 2 or 0 in P.shape:
            raise InvalidParameterError(f"projection entries must be a non-empty matrix, got {P.shape}")
        P.setflags(write=False)
        return cls(P)

    @classmethod
    def identity(cls, n: int) -> "ProjectionMatrix":
        return cls.from_entries(np.eye(n))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Project a single context (n,) or a block of contexts (A, n)."""
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.n:
            raise InvalidParameterError(f"context length {X.shape[-1]} does not match projection n={self.n}")
        return X @ self.entries.T

    def dump(self, path) -> None:
        """Write ``magic | d:u32 | n:u32`` then row-major little-endian float64 entries."""
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, self.d, self.n))
            fh.write(np.ascontiguousarray(self.entries, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ProjectionMatrix":
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise DataError(f"{path}: truncated projection header")
        magic, d, n = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise DataError(f"{path}: bad projection magic {magic!r}")
        body = raw[_HEADER.size:]
        if len(body) != 8 * d * n:
            raise DataError(f"{path}: expected {d}x{n} float64 entries, got {len(body)} bytes")
        entries = np.frombuffer(body, dtype="<f8").reshape(d, n).astype(np.float64)
        return cls.from_entries(entries)


def build_projection(n: int, d: int, kappa_sq: float, rng: Rng,
                     normalize_columns: bool = False) -> ProjectionMatrix:
    """Draw a ``d x n`` matrix with i.i.d. ``N(0, kappa_sq)`` entries.

    Entries are filled row-major from ``rng`` so the layout is reproducible
    from the seed. ``normalize_columns`` rescales each column to unit length,
    which is an alternative construction and off by default.
    """
    if n < 1 or d < 1:
        raise InvalidParameterError(f"n and d must be positive, got n={n}, d={d}")
    if d > n:
        raise InvalidParameterError(f"reduced dimension d={d} exceeds n={n}")
    if not kappa_sq > 0:
        raise InvalidParameterError(f"kappa_sq must be positive, got {kappa_sq}")
    P = np.sqrt(kappa_sq) * rng.gen.standard_normal((d, n))
    if normalize_columns:
        P /= np.linalg.norm(P, axis=0, keepdims=True)
    P.setflags(write=False)
    return ProjectionMatrix(P, float(kappa_sq), int(rng.seed))


def project(P: ProjectionMatrix, x: Context | np.ndarray) -> ReducedContext:
    xv = x.x if isinstance(x, Context) else np.asarray(x, dtype=np.float64)
    if xv.ndim != 1:
        raise InvalidParameterError("project() takes a single context vector")
    return ReducedContext(P.apply(xv))


def inner_product_distortion_trial(theta, x: Context | np.ndarray, d: int, epsilon: float,
                                   trials: int, rng: Rng) -> float:
    """Fraction of fresh projections that distort ``theta . x`` by more than
    ``epsilon * |x| * |theta|``.

    Each trial draws a full ``d x n`` matrix with entry variance ``1/d``.
    """
    if trials < 1:
        raise InvalidParameterError("trials must be positive")
    if d < 1:
        raise InvalidParameterError("d must be positive")
    if not 0 < epsilon < 1:
        raise InvalidParameterError(f"epsilon must lie in (0, 1), got {epsilon}")
    theta = np.asarray(theta, dtype=np.float64)
    xv = x.x if isinstance(x, Context) else np.asarray(x, dtype=np.float64)
    if theta.shape != xv.shape or theta.ndim != 1:
        raise InvalidParameterError("theta and x must be vectors of the same length")
    n = xv.shape[0]
    exact = float(theta @ xv)
    tol = epsilon * np.linalg.norm(xv) * np.linalg.norm(theta)
    scale = np.sqrt(1.0 / d)
    pair = np.stack([theta, xv], axis=1)  # (n, 2)
    chunk = max(1, _CHUNK_FLOATS // (d * n))
    violations = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        P = rng.gen.standard_normal((b, d, n))
        proj = (P @ pair) * scale  # (b, d, 2)
        approx = np.einsum("bi,bi->b", proj[..., 0], proj[..., 1])
        violations += int(np.count_nonzero(np.abs(approx - exact) > tol))
        done += b
    return violations / trials


def distortion_bound(d: int, epsilon: float) -> float:
    """Two-sided tail bound ``2 exp(-d eps^2 / 8)``."""
    return 2.0 * float(np.exp(-d * epsilon**2 / 8.0))


def estimate_context_bound(norms, slack: float = 0.1) -> float:
    """Norm bound from observed reduced-context norms plus ``slack``, at least 1."""
    norms = np.asarray(norms, dtype=np.float64)
    top = float(norms.max()) if norms.size else 0.0
    return max(1.0, (1.0 + slack) * top)
