"""Projected Thompson sampling and the baseline bandit policies.

Every policy exposes ``select(X) -> PolicyDecision`` for an ``(A, n)`` block of
arm contexts and ``update(arm, X, reward)`` once the reward is revealed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (
    AlgoParams,
    DataError,
    InvalidParameterError,
    NumericError,
    Rng,
    check_context_block,
    log_term,
)
from .projection import ProjectionMatrix, build_projection, estimate_context_bound

DRIFT_TOL = 1e-6
DEFAULT_REFRESH = 500
LZ_WARMUP = 50

_STATE_MAGIC = b"RPST"
_STATE_VERSION = 1
_STATE_HEADER = struct.Struct("<4sHIQdII")


def compute_nu(t: int, p: AlgoParams, L_z: Optional[float] = None, dim: Optional[int] = None,
               include_distortion: bool = True) -> float:
    """Posterior scale at round ``t``.

    ``R sqrt(4 dim log((2 + 2 t L_z^2 / lam) / delta)) + sqrt(lam) L_psi + eps sqrt(t)``.
    ``dim`` defaults to ``p.d``; ``include_distortion=False`` drops the last term.
    """
    if t < 1:
        raise InvalidParameterError(f"round index must be >= 1, got {t}")
    L_z = p.L_z if L_z is None else L_z
    if L_z is None:
        raise InvalidParameterError("L_z is unset; pass an estimate")
    dim = p.d if dim is None else dim
    nu = p.R * math.sqrt(4.0 * dim * log_term(t, L_z, p.lam, p.delta)) + math.sqrt(p.lam) * p.L_psi
    if include_distortion:
        nu += p.epsilon * math.sqrt(t)
    return nu


class PosteriorState:
    """Ridge statistics ``Z = lam I + sum z z^T``, ``b = sum r z`` and ``psi_hat = Z^-1 b``.

    ``Z_inv`` is maintained with rank-one (Sherman-Morrison) updates and
    recomputed directly every ``refresh_every`` updates or whenever a cheap
    residual probe shows drift above ``DRIFT_TOL``.
    """

    def __init__(self, dim: int, lam: float = 1.0, refresh_every: int = DEFAULT_REFRESH):
        if dim < 1:
            raise InvalidParameterError(f"dimension must be positive, got {dim}")
        if not lam > 0:
            raise InvalidParameterError(f"lambda must be positive, got {lam}")
        if refresh_every < 1:
            raise InvalidParameterError("refresh_every must be positive")
        self.dim = dim
        self.lam = float(lam)
        self.refresh_every = refresh_every
        self.Z = self.lam * np.eye(dim)
        self.Z_inv = np.eye(dim) / self.lam
        self.b = np.zeros(dim)
        self.psi_hat = np.zeros(dim)
        self.t = 1
        self.refreshes = 0
        self._since_refresh = 0
        self._probe = np.ones(dim)

    def copy(self) -> "PosteriorState":
        other = PosteriorState.__new__(PosteriorState)
        other.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v)
                               for k, v in self.__dict__.items()})
        return other

    def update(self, z, reward: float) -> "PosteriorState":
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dim,):
            raise InvalidParameterError(f"expected a length-{self.dim} vector, got {z.shape}")
        if not (np.all(np.isfinite(z)) and math.isfinite(reward)):
            raise DataError("non-finite context or reward in posterior update")
        self.Z += np.outer(z, z)
        self.b += reward * z
        Zi_z = self.Z_inv @ z
        self.Z_inv -= np.outer(Zi_z, Zi_z) / (1.0 + z @ Zi_z)
        self.t += 1
        self._since_refresh += 1
        if self._since_refresh >= self.refresh_every or self.drift() > DRIFT_TOL:
            self.refresh()
        self.psi_hat = self.Z_inv @ self.b
        return self

    def drift(self) -> float:
        """Max-abs residual of ``Z (Z_inv 1) - 1``; an O(dim^2) proxy for inverse error."""
        return float(np.max(np.abs(self.Z @ (self.Z_inv @ self._probe) - self._probe)))

    def refresh(self) -> None:
        eye = np.eye(self.dim)
        Z_inv = np.linalg.solve(self.Z, eye)
        self.Z_inv = 0.5 * (Z_inv + Z_inv.T)
        self._since_refresh = 0
        self.refreshes += 1
        err = float(np.max(np.abs(self.Z @ self.Z_inv - eye)))
        if err > DRIFT_TOL:
            raise NumericError(f"Gram matrix inverse residual {err:.3g} after refresh")
        self.psi_hat = self.Z_inv @ self.b

    def widths(self, Zs: np.ndarray) -> np.ndarray:
        """``sqrt(z^T Z^-1 z)`` for every row of ``Zs``."""
        q = np.einsum("ij,jk,ik->i", Zs, self.Z_inv, Zs)
        return np.sqrt(np.maximum(q, 0.0))

    def to_bytes(self) -> bytes:
        header = _STATE_HEADER.pack(_STATE_MAGIC, _STATE_VERSION, self.dim, self.t, self.lam,
                                    self.refresh_every, self._since_refresh)
        body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                        for a in (self.Z, self.Z_inv, self.b, self.psi_hat))
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PosteriorState":
        magic, version, dim, t, lam, refresh_every, since = _STATE_HEADER.unpack_from(raw)
        if magic != _STATE_MAGIC:
            raise DataError(f"bad posterior snapshot magic {magic!r}")
        if version != _STATE_VERSION:
            raise DataError(f"unsupported posterior snapshot version {version}")
        expected = _STATE_HEADER.size + 8 * (2 * dim * dim + 2 * dim)
        if len(raw) < expected:
            raise DataError("truncated posterior snapshot")
        state = cls(dim, lam, refresh_every)
        flat = np.frombuffer(raw, dtype="<f8", count=2 * dim * dim + 2 * dim,
                             offset=_STATE_HEADER.size).astype(np.float64)
        k = dim * dim
        state.Z = flat[:k].reshape(dim, dim).copy()
        state.Z_inv = flat[k:2 * k].reshape(dim, dim).copy()
        state.b = flat[2 * k:2 * k + dim].copy()
        state.psi_hat = flat[2 * k + dim:].copy()
        state.t = t
        state._since_refresh = since
        return state

    @property
    def nbytes(self) -> int:
        return _STATE_HEADER.size + 8 * (2 * self.dim * self.dim + 2 * self.dim)


@dataclass
class PolicyDecision:
    arm: int
    index_values: np.ndarray
    sampled_parameter: Optional[np.ndarray] = None


def _argmax(scores: np.ndarray) -> int:
    # np.argmax returns the first maximiser, i.e. the lowest arm id on ties.
    return int(np.argmax(scores))


def sample_parameter(state: PosteriorState, nu: float, rng: Rng) -> np.ndarray:
    """Draw from ``N(psi_hat, nu^2 Z^-1)`` via the Cholesky factor of ``Z_inv``."""
    if not nu >= 0:
        raise InvalidParameterError(f"nu must be non-negative, got {nu}")
    g = rng.gen.standard_normal(state.dim)
    if nu == 0:
        return state.psi_hat.copy()
    try:
        L = np.linalg.cholesky(state.Z_inv)
    except np.linalg.LinAlgError:
        state.refresh()
        try:
            L = np.linalg.cholesky(state.Z_inv)
        except np.linalg.LinAlgError as exc:
            raise NumericError("posterior covariance is not positive definite") from exc
    return state.psi_hat + nu * (L @ g)


def bcmab_select(state: PosteriorState, X: np.ndarray, P: ProjectionMatrix, nu: float,
                 rng: Rng) -> PolicyDecision:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidParameterError("bcmab_select needs at least one arm")
    Zs = P.apply(X)
    psi = sample_parameter(state, nu, rng)
    scores = Zs @ psi
    return PolicyDecision(_argmax(scores), scores, psi)


def linucb_select(state: PosteriorState, X: np.ndarray, alpha: float) -> PolicyDecision:
    """UCB index ``theta_hat . x + alpha * ||x||_{X^-1}`` in the raw context space."""
    if not alpha >= 0:
        raise InvalidParameterError(f"alpha must be non-negative, got {alpha}")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidParameterError("linucb_select needs at least one arm")
    scores = X @ state.psi_hat + alpha * state.widths(X)
    return PolicyDecision(_argmax(scores), scores)


def cbrap_select(state: PosteriorState, X: np.ndarray, P: ProjectionMatrix,
                 alpha_prime: float) -> PolicyDecision:
    """LinUCB on projected contexts."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise InvalidParameterError("cbrap_select needs at least one arm")
    return linucb_select(state, P.apply(X), alpha_prime)


def epsilon_greedy_select(means, epsilon: float, rng: Rng) -> PolicyDecision:
    means = np.asarray(means, dtype=np.float64)
    if means.size == 0:
        raise InvalidParameterError("epsilon-greedy needs at least one arm")
    if not 0 <= epsilon <= 1:
        raise InvalidParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
    if rng.gen.random() < epsilon:
        return PolicyDecision(int(rng.gen.integers(means.size)), means)
    return PolicyDecision(_argmax(means), means)


def random_select(num_arms: int, rng: Rng) -> PolicyDecision:
    if num_arms < 1:
        raise InvalidParameterError("random policy needs at least one arm")
    return PolicyDecision(int(rng.gen.integers(num_arms)), np.full(num_arms, 1.0 / num_arms))


class Policy:
    name = "policy"

    def select(self, X: np.ndarray) -> PolicyDecision:
        raise NotImplementedError

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        raise NotImplementedError


class BCMABRP(Policy):
    """Thompson sampling on randomly projected contexts.

    The projection is drawn once from the ``projection`` stream unless an
    explicit ``projection`` is passed. With ``params.L_z=None`` the bound on
    reduced-context norms is the running maximum over the first
    ``LZ_WARMUP`` rounds plus 10%, then frozen.
    """

    name = "bcmab-rp"

    def __init__(self, n: int, params: AlgoParams, rng: Rng,
                 projection: Optional[ProjectionMatrix] = None,
                 projection_rng: Optional[Rng] = None,
                 normalize_columns: bool = False,
                 refresh_every: int = DEFAULT_REFRESH,
                 include_distortion: bool = True):
        if projection is None:
            if projection_rng is None:
                raise InvalidParameterError("need a projection or a projection rng")
            projection = build_projection(n, params.d, params.kappa_sq, projection_rng,
                                          normalize_columns=normalize_columns)
        if projection.n != n or projection.d != params.d:
            raise InvalidParameterError(
                f"projection is {projection.d}x{projection.n}, expected {params.d}x{n}")
        self.n = n
        self.params = params
        self.P = projection
        self.rng = rng
        self.include_distortion = include_distortion
        self.state = PosteriorState(params.d, params.lam, refresh_every)
        self._max_z = 0.0
        self._L_z = params.L_z

    @property
    def L_z(self) -> float:
        if self._L_z is not None:
            return self._L_z
        return estimate_context_bound([self._max_z])

    def nu(self) -> float:
        return compute_nu(self.state.t, self.params, L_z=self.L_z, dim=self.state.dim,
                          include_distortion=self.include_distortion)

    def _observe_norms(self, Zs: np.ndarray) -> None:
        if self.params.L_z is None and self.state.t <= LZ_WARMUP:
            self._max_z = max(self._max_z, float(np.sqrt(np.max(np.einsum("ij,ij->i", Zs, Zs)))))

    def select(self, X: np.ndarray) -> PolicyDecision:
        X = check_context_block(X)
        if self.params.L_z is None and self.state.t <= LZ_WARMUP:
            self._observe_norms(self.P.apply(X))
        return bcmab_select(self.state, X, self.P, self.nu(), self.rng)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        self.state.update(self.P.apply(X[arm]), reward)

    def snapshot(self) -> bytes:
        """Posterior bytes followed by a length-prefixed JSON trailer (rng state, L_z)."""
        extra = json.dumps({"max_z": self._max_z, "L_z": self._L_z,
                            "rng": _jsonable(self.rng.gen.bit_generator.state)}, sort_keys=True).encode()
        return self.state.to_bytes() + struct.pack("<I", len(extra)) + extra

    def restore(self, raw: bytes) -> None:
        state = PosteriorState.from_bytes(raw)
        if state.dim != self.state.dim:
            raise DataError(f"snapshot dimension {state.dim} does not match {self.state.dim}")
        off = state.nbytes
        (size,) = struct.unpack_from("<I", raw, off)
        extra = json.loads(raw[off + 4:off + 4 + size].decode())
        self.state = state
        self._max_z = extra["max_z"]
        self._L_z = extra["L_z"]
        self.rng.gen.bit_generator.state = _from_jsonable(extra["rng"])


def _jsonable(obj):
    # Bit-generator states hold uint64 arrays; store them as tagged lists of ints.
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__u64__": [int(v) for v in obj.ravel()]}
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if set(obj) == {"__u64__"}:
            return np.array(obj["__u64__"], dtype=np.uint64)
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj


class LinearTS(BCMABRP):
    """Thompson sampling in the original context space.

    Same machinery as :class:`BCMABRP` with an identity projection; the
    posterior scale uses ``dim = n`` and omits the projection-distortion term
    unless ``include_distortion`` is set.
    """

    name = "linear-ts"

    def __init__(self, n: int, params: AlgoParams, rng: Rng, include_distortion: bool = False,
                 refresh_every: int = DEFAULT_REFRESH):
        if params.d != n:
            params = AlgoParams(d=n, lam=params.lam, delta=params.delta, epsilon=params.epsilon,
                                R=params.R, L_z=params.L_z, L_psi=params.L_psi)
        super().__init__(n, params, rng, projection=ProjectionMatrix.identity(n),
                         refresh_every=refresh_every, include_distortion=include_distortion)

    def select(self, X: np.ndarray) -> PolicyDecision:
        X = check_context_block(X)
        if self.params.L_z is None and self.state.t <= LZ_WARMUP:
            self._observe_norms(X)
        theta = sample_parameter(self.state, self.nu(), self.rng)
        scores = X @ theta
        return PolicyDecision(_argmax(scores), scores, theta)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        self.state.update(np.asarray(X[arm], dtype=np.float64), reward)


class LinUCB(Policy):
    name = "linucb"

    def __init__(self, n: int, lam: float = 1.0, alpha: float = 1.0,
                 refresh_every: int = DEFAULT_REFRESH):
        self.alpha = alpha
        self.state = PosteriorState(n, lam, refresh_every)

    def select(self, X: np.ndarray) -> PolicyDecision:
        return linucb_select(self.state, check_context_block(X), self.alpha)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        self.state.update(np.asarray(X[arm], dtype=np.float64), reward)


class CBRAP(Policy):
    name = "cbrap"

    def __init__(self, n: int, d: int, rng: Optional[Rng] = None, lam: float = 1.0,
                 alpha: float = 1.0, projection: Optional[ProjectionMatrix] = None,
                 kappa_sq: Optional[float] = None, normalize_columns: bool = False,
                 refresh_every: int = DEFAULT_REFRESH):
        if projection is None:
            if rng is None:
                raise InvalidParameterError("need a projection or a projection rng")
            projection = build_projection(n, d, kappa_sq or 1.0 / d, rng,
                                          normalize_columns=normalize_columns)
        self.P = projection
        self.alpha = alpha
        self.state = PosteriorState(projection.d, lam, refresh_every)

    def select(self, X: np.ndarray) -> PolicyDecision:
        return cbrap_select(self.state, check_context_block(X), self.P, self.alpha)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        self.state.update(self.P.apply(X[arm]), reward)


class EpsilonGreedy(Policy):
    """Context-free: tracks the empirical mean reward of each arm id."""

    name = "egreedy"

    def __init__(self, num_arms: int, epsilon: float, rng: Rng):
        if num_arms < 1:
            raise InvalidParameterError("need at least one arm")
        if not 0 <= epsilon <= 1:
            raise InvalidParameterError(f"epsilon must lie in [0, 1], got {epsilon}")
        self.epsilon = epsilon
        self.rng = rng
        self.counts = np.zeros(num_arms, dtype=np.int64)
        self.sums = np.zeros(num_arms)

    @property
    def means(self) -> np.ndarray:
        out = np.zeros_like(self.sums)
        played = self.counts > 0
        out[played] = self.sums[played] / self.counts[played]
        return out

    def select(self, X: np.ndarray) -> PolicyDecision:
        if len(X) != self.counts.size:
            raise InvalidParameterError(f"expected {self.counts.size} arms, got {len(X)}")
        return epsilon_greedy_select(self.means, self.epsilon, self.rng)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        self.counts[arm] += 1
        self.sums[arm] += reward


class RandomPolicy(Policy):
    name = "random"

    def __init__(self, rng: Rng):
        self.rng = rng

    def select(self, X: np.ndarray) -> PolicyDecision:
        return random_select(len(X), self.rng)

    def update(self, arm: int, X: np.ndarray, reward: float) -> None:
        pass
