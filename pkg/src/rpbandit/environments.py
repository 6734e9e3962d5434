"""Reward-generating environments: synthetic linear and offline replay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .core import EndOfData, InvalidParameterError, Rng, make_rng

CONTEXT_GENERATORS = ("ball", "latent")


def _unit_rows(g: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    norms[norms == 0] = 1.0
    return g / norms


def _clip_rows(g: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(norms, 1.0)


@dataclass
class SyntheticEnv:
    """Linear environment with a known ``theta_star``.

    Rewards are Bernoulli with mean ``(theta_star . x + 1) / 2``, which keeps
    them in ``[0, 1]`` and preserves the optimal arm of ``theta_star . x``.

    Context generators
    ------------------
    ``ball``
        Each arm gets a fresh context every round: isotropic direction times a
        radius drawn uniformly from ``[0, 1]``.
    ``latent``
        Contexts live in a fixed ``rank``-dimensional subspace. Each arm has a
        persistent latent profile (isotropic direction, radius uniform in
        ``[0, 1]``) and each round adds Gaussian jitter of scale ``jitter``
        per latent coordinate, clipped back to the unit ball. ``theta_star``
        lies in the same subspace.
    """

    n: int
    num_arms: int
    theta_star: np.ndarray
    seed: int
    context_gen: str = "ball"
    noise_scale: float = 0.5
    basis: Optional[np.ndarray] = None
    profiles: Optional[np.ndarray] = None
    jitter: float = 0.0
    noise_rng: Rng = field(init=False, repr=False)

    def __post_init__(self):
        if self.context_gen not in CONTEXT_GENERATORS:
            raise InvalidParameterError(f"unknown context generator {self.context_gen!r}")
        if self.num_arms < 1 or self.n < 1:
            raise InvalidParameterError("need n >= 1 and at least one arm")
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64)
        if self.theta_star.shape != (self.n,):
            raise InvalidParameterError("theta_star has the wrong length")
        if np.linalg.norm(self.theta_star) > 1 + 1e-9:
            raise InvalidParameterError("theta_star must have L2 norm at most 1")
        self.noise_rng = make_rng(self.seed, "noise")
        self._ctx_rng = make_rng(self.seed, "environment").child("contexts")

    def contexts(self, t: int) -> np.ndarray:
        """The ``(num_arms, n)`` context block of round ``t``; a pure function of ``(seed, t)``."""
        if t < 1:
            raise InvalidParameterError(f"round index must be >= 1, got {t}")
        gen = self._ctx_rng.child(t).gen
        if self.context_gen == "ball":
            g = _unit_rows(gen.standard_normal((self.num_arms, self.n)))
            return g * gen.random((self.num_arms, 1))
        k = self.basis.shape[1]
        g = self.profiles + self.jitter * gen.standard_normal((self.num_arms, k))
        return _clip_rows(g) @ self.basis.T

    def mean_reward(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X) @ self.theta_star + 1.0) / 2.0

    def reward(self, x: np.ndarray, rng: Optional[Rng] = None) -> float:
        """Draw one Bernoulli reward for context ``x``."""
        rng = self.noise_rng if rng is None else rng
        return float(rng.gen.random() < self.mean_reward(x))

    @property
    def has_truth(self) -> bool:
        return True


def make_synthetic_env(n: int, num_arms: int, seed: int, context_gen: str = "ball",
                       rank: int = 8, jitter: float = 0.1) -> SyntheticEnv:
    """Build a synthetic environment; ``theta_star`` has a uniform direction and norm in [0.5, 1]."""
    env_rng = make_rng(seed, "environment")
    gen = env_rng.child("theta").gen
    if context_gen == "latent":
        if not 1 <= rank <= n:
            raise InvalidParameterError(f"latent rank must lie in [1, n], got {rank}")
        basis, _ = np.linalg.qr(env_rng.child("basis").gen.standard_normal((n, rank)))
        w = _unit_rows(gen.standard_normal(rank)) * gen.uniform(0.5, 1.0)
        pg = env_rng.child("profiles").gen
        profiles = _unit_rows(pg.standard_normal((num_arms, rank))) * pg.random((num_arms, 1))
        return SyntheticEnv(n, num_arms, basis @ w, seed, context_gen, basis=basis,
                            profiles=profiles, jitter=jitter)
    theta = _unit_rows(gen.standard_normal(n)) * gen.uniform(0.5, 1.0)
    return SyntheticEnv(n, num_arms, theta, seed, context_gen)


def synthetic_round(env: SyntheticEnv, t: int) -> np.ndarray:
    return env.contexts(t)


def synthetic_reward(env: SyntheticEnv, x, rng: Optional[Rng] = None) -> float:
    return env.reward(np.asarray(x, dtype=np.float64), rng)


@dataclass
class RegretLedger:
    per_round: List[Tuple[float, float]] = field(default_factory=list)
    cumulative: List[float] = field(default_factory=list)

    @property
    def total(self) -> float:
        return self.cumulative[-1] if self.cumulative else 0.0

    def increments(self) -> np.ndarray:
        return np.array([best - got for best, got in self.per_round])


def record_regret(ledger: RegretLedger, env: SyntheticEnv, X: np.ndarray, chosen: int) -> float:
    """Append the pseudo-regret of playing ``chosen`` and return the increment."""
    X = np.asarray(X, dtype=np.float64)
    if not 0 <= chosen < X.shape[0]:
        raise InvalidParameterError(f"arm {chosen} is not in this round's {X.shape[0]} arms")
    values = X @ env.theta_star
    best, got = float(values.max()), float(values[chosen])
    inc = best - got
    ledger.per_round.append((best, got))
    ledger.cumulative.append(ledger.total + inc)
    return inc


class ReplayEnv:
    """Offline replay over a feature artifact.

    Each round draws a user uniformly at random (with replacement) from the
    artifact's user pool; every item in the artifact is a candidate arm. The
    chosen item's binarised rating is revealed, with unrated pairs paying 0.
    """

    def __init__(self, artifact, horizon: int, seed: int):
        if horizon < 1:
            raise InvalidParameterError("horizon must be positive")
        self.artifact = artifact
        self.seed = seed
        self.num_arms = artifact.item_factors.shape[0]
        self.n = artifact.n
        gen = make_rng(seed, "environment").child("users").gen
        self.user_sequence = gen.integers(artifact.user_factors.shape[0], size=horizon)
        self._items = artifact.scale * artifact.item_factors

    @property
    def has_truth(self) -> bool:
        return False

    def _user(self, t: int) -> int:
        if t < 1:
            raise InvalidParameterError(f"round index must be >= 1, got {t}")
        if t > self.user_sequence.size:
            raise EndOfData(f"replay schedule has {self.user_sequence.size} rounds")
        return int(self.user_sequence[t - 1])

    def contexts(self, t: int) -> np.ndarray:
        u = self._user(t)
        user = np.broadcast_to(self.artifact.scale * self.artifact.user_factors[u],
                               (self.num_arms, self.artifact.k_user))
        return np.hstack([user, self._items])

    def feedback(self, t: int, chosen: int) -> float:
        if not 0 <= chosen < self.num_arms:
            raise InvalidParameterError(f"item index {chosen} out of range")
        return float(self.artifact.rewards[self._user(t), chosen])


def replay_round(env: ReplayEnv, t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Contexts for round ``t`` and the user's hidden reward row."""
    X = env.contexts(t)
    return X, env.artifact.rewards[env._user(t)]


def replay_feedback(env: ReplayEnv, t: int, chosen: int) -> float:
    return env.feedback(t, chosen)
