"""Ratings ingestion: parse, pick top items, factorise, build replay features.

Artifact layout (all little-endian)
-----------------------------------
``<prefix>.features.bin``::

    magic      4s   b"RPFA"
    version    u16  1
    dataset    u8   0 = movielens, 1 = jester
    pad        1 byte
    n          u32  k_user + k_item
    n_users    u32
    n_items    u32  (the number of arms, A)
    k_user     u32
    k_item     u32
    seed       u64  factorisation seed
    scale      f64  global normalisation constant c
    user_ids   i64[n_users]
    item_ids   i64[n_items]
    user_factors  f64[n_users, k_user]  row-major, unscaled
    item_factors  f64[n_items, k_item]  row-major, unscaled

The context of (user u, item i) is ``c * concat(user_factors[u], item_factors[i])``.

``<prefix>.rewards.bin``::

    magic      4s   b"RPRW"
    version    u16  1
    pad        2 bytes
    n_users    u32
    n_items    u32
    count      u64  number of rated (user, item) pairs
    stream     LEB128 varints, one per rated pair in (user, item) order:
               ((L_k - L_{k-1}) << 1) | reward_bit with L = user * n_items + item
               and L_{-1} = 0
"""

from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .core import DataError, InvalidParameterError, Rng

log = logging.getLogger(__name__)

DATASETS = ("movielens", "jester")
_TAGS = {"movielens": 0, "jester": 1}

_FEAT_MAGIC = b"RPFA"
_FEAT_HEADER = struct.Struct("<4sHBxIIIIIQd")
_REW_MAGIC = b"RPRW"
_REW_HEADER = struct.Struct("<4sH2xIIQ")
_VERSION = 1

MALFORMED_LIMIT = 0.01


@dataclass(frozen=True)
class RatingScale:
    lo: float
    hi: float
    step: Optional[float]

    def contains(self, r: float) -> bool:
        if not (math.isfinite(r) and self.lo <= r <= self.hi):
            return False
        if self.step is None:
            return True
        k = (r - self.lo) / self.step
        return abs(k - round(k)) < 1e-9


SCALES = {
    "movielens": RatingScale(0.5, 5.0, 0.5),
    "jester": RatingScale(-10.0, 10.0, None),
}


@dataclass
class RatingsTable:
    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    kind: str
    malformed: int = 0

    @property
    def scale(self) -> RatingScale:
        return SCALES[self.kind]

    def __len__(self) -> int:
        return self.ratings.size

    @property
    def n_users(self) -> int:
        return np.unique(self.users).size

    def restrict_items(self, items) -> "RatingsTable":
        keep = np.isin(self.items, np.asarray(items))
        return RatingsTable(self.users[keep], self.items[keep], self.ratings[keep], self.kind)


def _check_kind(kind: str) -> None:
    if kind not in DATASETS:
        raise InvalidParameterError(f"unknown dataset kind {kind!r}; expected one of {DATASETS}")


def parse_ratings(path, kind: str, delimiter: str = ",", skip_header: Optional[bool] = None) -> RatingsTable:
    """Read ``user, item, rating[, ...]`` rows.

    ``skip_header=None`` skips the first row only when its rating field does not
    parse as a number. Duplicate (user, item) pairs keep the last occurrence.
    Rows that fail to parse or fall off the dataset's rating grid are counted
    as malformed; more than 1% malformed is a :class:`DataError`.
    """
    _check_kind(kind)
    scale = SCALES[kind]
    text = Path(path).read_text(encoding="utf-8")
    if delimiter == "::":
        text = text.replace("::", "\t")
        delimiter = "\t"
    rows = [r for r in csv.reader(io.StringIO(text), delimiter=delimiter) if r and any(c.strip() for c in r)]
    if rows and skip_header is None:
        try:
            float(rows[0][2])
        except (IndexError, ValueError):
            skip_header = True
    if skip_header and rows:
        rows = rows[1:]
    users, items, ratings, bad = [], [], [], []
    for lineno, row in enumerate(rows, start=2 if skip_header else 1):
        try:
            u, i, r = int(row[0]), int(row[1]), float(row[2])
        except (IndexError, ValueError):
            bad.append((lineno, row))
            continue
        if not scale.contains(r):
            bad.append((lineno, row))
            continue
        users.append(u)
        items.append(i)
        ratings.append(r)
    total = len(rows)
    if total and len(bad) / total > MALFORMED_LIMIT:
        sample = "; ".join(f"line {n}: {','.join(r)}" for n, r in bad[:3])
        raise DataError(f"{len(bad)} of {total} rows malformed in {path} (e.g. {sample})")
    if bad:
        log.warning("skipped %d malformed rows in %s", len(bad), path)
    users = np.array(users, dtype=np.int64)
    items = np.array(items, dtype=np.int64)
    ratings = np.array(ratings, dtype=np.float64)
    if users.size:
        # keep the last occurrence of each (user, item) pair
        order = np.lexsort((np.arange(users.size), items, users))
        users, items, ratings = users[order], items[order], ratings[order]
        last = np.ones(users.size, dtype=bool)
        last[:-1] = (users[1:] != users[:-1]) | (items[1:] != items[:-1])
        users, items, ratings = users[last], items[last], ratings[last]
    return RatingsTable(users, items, ratings, kind, malformed=len(bad))


def select_top_items(table: RatingsTable, A: int) -> List[int]:
    """Items ordered by rating count, then mean rating, then id; first ``A``."""
    ids, inv, counts = np.unique(table.items, return_inverse=True, return_counts=True)
    if not 1 <= A <= ids.size:
        raise InvalidParameterError(f"cannot select {A} items out of {ids.size}")
    means = np.bincount(inv, weights=table.ratings) / counts
    order = np.lexsort((ids, -means, -counts))
    return [int(i) for i in ids[order[:A]]]


@dataclass
class FactorModel:
    user_ids: np.ndarray
    item_ids: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    k: int
    reg: float
    iterations: int
    seed: int
    losses: List[float] = field(default_factory=list)

    def predict(self) -> np.ndarray:
        return self.user_factors @ self.item_factors.T


def _groups(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray, n_rows: int):
    order = np.argsort(rows, kind="stable")
    rows, cols, vals = rows[order], cols[order], vals[order]
    bounds = np.searchsorted(rows, np.arange(n_rows + 1))
    return [(cols[bounds[r]:bounds[r + 1]], vals[bounds[r]:bounds[r + 1]]) for r in range(n_rows)]


def _ridge_pass(groups, other: np.ndarray, reg: float, out: np.ndarray) -> None:
    k = other.shape[1]
    eye = reg * np.eye(k)
    for r, (idx, vals) in enumerate(groups):
        if idx.size == 0:
            out[r] = 0.0
            continue
        F = other[idx]
        G = F.T @ F + eye
        rhs = F.T @ vals
        try:
            out[r] = np.linalg.solve(G, rhs)
        except np.linalg.LinAlgError:
            out[r] = np.linalg.lstsq(G, rhs, rcond=None)[0]


def _loss(u_idx, i_idx, vals, U, V, reg) -> float:
    resid = vals - np.einsum("ij,ij->i", U[u_idx], V[i_idx])
    return float(resid @ resid + reg * (np.sum(U * U) + np.sum(V * V)))


def factorize(table: RatingsTable, k: int, reg: float, iterations: int, rng: Rng) -> FactorModel:
    """Alternating ridge regression on the observed entries.

    Minimises ``sum (r_ui - u_u . v_i)^2 + reg (|U|_F^2 + |V|_F^2)``; each
    iteration solves every user row, then every item row, exactly. Factors
    start i.i.d. uniform on ``[0, 1/sqrt(k)]``.
    """
    if k < 1:
        raise InvalidParameterError(f"latent dimension must be positive, got {k}")
    if iterations < 1:
        raise InvalidParameterError("iterations must be positive")
    if reg < 0:
        raise InvalidParameterError("reg must be non-negative")
    user_ids, u_idx = np.unique(table.users, return_inverse=True)
    item_ids, i_idx = np.unique(table.items, return_inverse=True)
    if k > user_ids.size and k > item_ids.size:
        raise InvalidParameterError(f"k={k} exceeds both {user_ids.size} users and {item_ids.size} items")
    hi = 1.0 / math.sqrt(k)
    U = rng.gen.uniform(0.0, hi, size=(user_ids.size, k))
    V = rng.gen.uniform(0.0, hi, size=(item_ids.size, k))
    vals = table.ratings
    by_user = _groups(u_idx, i_idx, vals, user_ids.size)
    by_item = _groups(i_idx, u_idx, vals, item_ids.size)
    losses = []
    for it in range(iterations):
        _ridge_pass(by_user, V, reg, U)
        _ridge_pass(by_item, U, reg, V)
        losses.append(_loss(u_idx, i_idx, vals, U, V, reg))
        log.debug("als iteration %d loss %.6g", it + 1, losses[-1])
    return FactorModel(user_ids, item_ids, U, V, k, reg, iterations, int(rng.seed), losses)


def balanced_factors(model: FactorModel):
    """Rotate factors so that columns are ordered by singular value.

    Returns ``(U', V')`` with ``U' V'^T == U V^T`` and each column pair carrying
    an equal share ``sqrt(s_j)`` of the j-th singular value, so truncating to
    leading columns keeps the strongest components.
    """
    Qu, Ru = np.linalg.qr(model.user_factors)
    Qv, Rv = np.linalg.qr(model.item_factors)
    a, s, bt = np.linalg.svd(Ru @ Rv.T, full_matrices=False)
    root = np.sqrt(s)
    U, V = (Qu @ a) * root, (Qv @ bt.T) * root
    pad = model.k - s.size  # fewer users or items than k
    if pad > 0:
        U = np.hstack([U, np.zeros((U.shape[0], pad))])
        V = np.hstack([V, np.zeros((V.shape[0], pad))])
    return U, V


def binarize(kind: str, rating: Optional[float]) -> int:
    """Reward bit for a rating; ``None`` (unrated) pays 0."""
    _check_kind(kind)
    if rating is None or not math.isfinite(rating):
        return 0
    if kind == "movielens":
        return int(rating > 3.0)
    return int(rating > 0.0)


@dataclass
class FeatureArtifact:
    kind: str
    user_ids: np.ndarray
    item_ids: np.ndarray
    user_factors: np.ndarray
    item_factors: np.ndarray
    scale: float
    rewards: np.ndarray  # (n_users, n_items) int8; 0 also for unrated
    rated: np.ndarray  # (n_users, n_items) bool
    seed: int = 0

    @property
    def k_user(self) -> int:
        return self.user_factors.shape[1]

    @property
    def k_item(self) -> int:
        return self.item_factors.shape[1]

    @property
    def n(self) -> int:
        return self.k_user + self.k_item

    def context(self, user: int, item: int) -> np.ndarray:
        return self.scale * np.concatenate([self.user_factors[user], self.item_factors[item]])

    def all_contexts(self) -> np.ndarray:
        """Every (user, item) context, shape ``(n_users, n_items, n)``."""
        nu, ni = self.user_factors.shape[0], self.item_factors.shape[0]
        left = np.broadcast_to(self.user_factors[:, None, :], (nu, ni, self.k_user))
        right = np.broadcast_to(self.item_factors[None, :, :], (nu, ni, self.k_item))
        return self.scale * np.concatenate([left, right], axis=2)

    def save(self, prefix) -> None:
        save_artifact(self, prefix)


def build_feature_artifact(model: FactorModel, table: RatingsTable, top_items, kind: str,
                           k_user: Optional[int] = None, k_item: Optional[int] = None) -> FeatureArtifact:
    """Concatenate user and item factors into replay contexts with binary rewards.

    ``k_user`` / ``k_item`` below ``model.k`` keep only the leading columns of
    the balanced factors; by default the raw factors are used as-is. All
    contexts are scaled by one global constant so the largest has unit norm.
    """
    _check_kind(kind)
    k_user = model.k if k_user is None else k_user
    k_item = model.k if k_item is None else k_item
    if not (1 <= k_user <= model.k and 1 <= k_item <= model.k):
        raise InvalidParameterError(f"k_user/k_item must lie in [1, {model.k}]")
    top_items = np.asarray(top_items, dtype=np.int64)
    item_pos = {int(i): p for p, i in enumerate(model.item_ids)}
    missing = [int(i) for i in top_items if int(i) not in item_pos]
    if missing:
        raise DataError(f"items {missing[:5]} are not in the factor model")
    if k_user == model.k and k_item == model.k:
        Ub, Vb = model.user_factors, model.item_factors
    else:
        Ub, Vb = balanced_factors(model)
    U = np.ascontiguousarray(Ub[:, :k_user])
    V = np.ascontiguousarray(Vb[[item_pos[int(i)] for i in top_items], :k_item])
    top = math.sqrt(float(np.max(np.sum(U * U, axis=1))) + float(np.max(np.sum(V * V, axis=1))))
    if top == 0:
        raise DataError("all factor vectors are zero; cannot normalise")
    scale = 1.0 / top

    user_pos = {int(u): p for p, u in enumerate(model.user_ids)}
    col_of = {int(i): c for c, i in enumerate(top_items)}
    rewards = np.zeros((U.shape[0], top_items.size), dtype=np.int8)
    rated = np.zeros_like(rewards, dtype=bool)
    for u, i, r in zip(table.users, table.items, table.ratings):
        c = col_of.get(int(i))
        if c is None:
            continue
        row = user_pos.get(int(u))
        if row is None:
            raise DataError(f"user {u} is not in the factor model")
        rewards[row, c] = binarize(kind, float(r))
        rated[row, c] = True
    return FeatureArtifact(kind, model.user_ids.copy(), top_items, U, V, scale, rewards, rated, model.seed)


def _varint(value: int, out: bytearray) -> None:
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return


def _read_varints(buf: bytes, count: int, offset: int) -> np.ndarray:
    out = np.empty(count, dtype=np.int64)
    pos = offset
    for k in range(count):
        shift = value = 0
        while True:
            if pos >= len(buf):
                raise DataError("truncated reward stream")
            byte = buf[pos]
            pos += 1
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                break
            shift += 7
        out[k] = value
    if pos != len(buf):
        raise DataError("trailing bytes after reward stream")
    return out


def artifact_paths(prefix):
    prefix = str(prefix)
    return Path(prefix + ".features.bin"), Path(prefix + ".rewards.bin")


def save_artifact(art: FeatureArtifact, prefix) -> None:
    feat_path, rew_path = artifact_paths(prefix)
    n_users, n_items = art.rewards.shape
    with open(feat_path, "wb") as fh:
        fh.write(_FEAT_HEADER.pack(_FEAT_MAGIC, _VERSION, _TAGS[art.kind], art.n, n_users, n_items,
                                   art.k_user, art.k_item, art.seed, art.scale))
        for arr, dt in ((art.user_ids, "<i8"), (art.item_ids, "<i8"),
                        (art.user_factors, "<f8"), (art.item_factors, "<f8")):
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    lin = np.flatnonzero(art.rated.ravel())
    bits = art.rewards.ravel()[lin].astype(np.int64)
    deltas = np.diff(lin, prepend=0)
    stream = bytearray()
    for dlt, bit in zip(deltas.tolist(), bits.tolist()):
        _varint((dlt << 1) | bit, stream)
    with open(rew_path, "wb") as fh:
        fh.write(_REW_HEADER.pack(_REW_MAGIC, _VERSION, n_users, n_items, lin.size))
        fh.write(bytes(stream))


def load_artifact(prefix) -> FeatureArtifact:
    feat_path, rew_path = artifact_paths(prefix)
    raw = feat_path.read_bytes()
    if len(raw) < _FEAT_HEADER.size:
        raise DataError(f"{feat_path}: truncated header")
    magic, version, tag, n, n_users, n_items, k_user, k_item, seed, scale = _FEAT_HEADER.unpack_from(raw)
    if magic != _FEAT_MAGIC or version != _VERSION:
        raise DataError(f"{feat_path}: not a version-{_VERSION} feature file")
    if n != k_user + k_item:
        raise DataError(f"{feat_path}: n={n} but k_user + k_item = {k_user + k_item}")
    kind = {v: k for k, v in _TAGS.items()}.get(tag)
    if kind is None:
        raise DataError(f"{feat_path}: unknown dataset tag {tag}")
    sizes = [(n_users, "<i8"), (n_items, "<i8"), (n_users * k_user, "<f8"), (n_items * k_item, "<f8")]
    if len(raw) != _FEAT_HEADER.size + 8 * sum(c for c, _ in sizes):
        raise DataError(f"{feat_path}: body size does not match header")
    arrays, off = [], _FEAT_HEADER.size
    for count, dt in sizes:
        arrays.append(np.frombuffer(raw, dtype=dt, count=count, offset=off).copy())
        off += 8 * count
    user_ids, item_ids, uf, vf = arrays

    rraw = rew_path.read_bytes()
    if len(rraw) < _REW_HEADER.size:
        raise DataError(f"{rew_path}: truncated header")
    rmagic, rversion, ru, ri, count = _REW_HEADER.unpack_from(rraw)
    if rmagic != _REW_MAGIC or rversion != _VERSION or (ru, ri) != (n_users, n_items):
        raise DataError(f"{rew_path}: header does not match {feat_path}")
    codes = _read_varints(rraw, count, _REW_HEADER.size)
    lin = np.cumsum(codes >> 1)
    if lin.size and (lin[-1] >= n_users * n_items or np.any(np.diff(lin) <= 0)):
        raise DataError(f"{rew_path}: reward indices out of order or range")
    rewards = np.zeros(n_users * n_items, dtype=np.int8)
    rated = np.zeros(n_users * n_items, dtype=bool)
    rewards[lin] = (codes & 1).astype(np.int8)
    rated[lin] = True
    return FeatureArtifact(kind, user_ids, item_ids, uf.reshape(n_users, k_user), vf.reshape(n_items, k_item),
                           scale, rewards.reshape(n_users, n_items), rated.reshape(n_users, n_items), seed)


def ingest(path, kind: str, k: int, top_items: int, reg: float, iterations: int, rng: Rng,
           delimiter: str = ",", k_user: Optional[int] = None, k_item: Optional[int] = None) -> FeatureArtifact:
    """Full pipeline from a ratings file to a feature artifact over the top items."""
    table = parse_ratings(path, kind, delimiter=delimiter)
    if len(table) == 0:
        raise DataError(f"{path}: no ratings")
    top = select_top_items(table, top_items)
    sub = table.restrict_items(top)
    model = factorize(sub, k, reg, iterations, rng)
    log.info("factorised %d ratings: final loss %.6g", len(sub), model.losses[-1])
    return build_feature_artifact(model, sub, top, kind, k_user=k_user, k_item=k_item)
