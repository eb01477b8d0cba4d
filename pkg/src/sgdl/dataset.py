"""Rating ingestion, noise labelling, per-user splitting and noise injection."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ParseError

TRAIN, VAL, TEST = 0, 1, 2
SPLIT_NAMES = {TRAIN: "train", VAL: "val", TEST: "test"}


@dataclass(frozen=True)
class RawRating:
    user: int
    item: int
    rating: int
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    label: int = 1
    noise_flag: Optional[bool] = None


def parse_interactions(path, delim="\t", rating_scale=(1, 5)):
    """Read ``user<delim>item<delim>rating[<delim>timestamp]`` lines.

    Blank lines are skipped. Raises ParseError (with the 1-based line number)
    on a short line, a non-integer field, a negative id or a rating outside
    ``rating_scale``; pass ``rating_scale=None`` to skip the range check.
    """
    out = []
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(delim)
            if len(parts) < 3:
                raise ParseError(f"expected >=3 fields separated by {delim!r}, got {len(parts)}",
                                 line=lineno, path=path)
            try:
                user, item, rating = int(parts[0]), int(parts[1]), int(parts[2])
                ts = int(parts[3]) if len(parts) > 3 and parts[3].strip() else None
            except ValueError as exc:
                raise ParseError(f"non-integer field ({exc})", line=lineno, path=path) from None
            if user < 0 or item < 0:
                raise ParseError("negative id", line=lineno, path=path)
            if rating_scale is not None and not rating_scale[0] <= rating <= rating_scale[1]:
                raise ParseError(f"rating {rating} outside {rating_scale}", line=lineno, path=path)
            out.append(RawRating(user, item, rating, ts))
    return out


class Adjacency:
    """Sorted per-user item lists (CSR) with vectorised membership tests."""

    def __init__(self, users, items, num_users, num_items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        self.num_users = int(num_users)
        self.num_items = int(num_items)
        keys = np.unique(users * self.num_items + items)
        self.keys = keys
        self.indices = keys % self.num_items
        counts = np.bincount(keys // self.num_items, minlength=self.num_users)
        self.indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def items_of(self, u):
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def degree(self, u=None):
        deg = np.diff(self.indptr)
        return deg if u is None else int(deg[u])

    def contains(self, users, items):
        q = np.asarray(users, dtype=np.int64) * self.num_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1) if len(self.keys) else pos
        if not len(self.keys):
            return np.zeros(np.shape(q), dtype=bool)
        return self.keys[pos] == q

    def as_dict(self):
        return {u: self.items_of(u).tolist() for u in range(self.num_users)}


@dataclass
class InteractionTable:
    """Observed interactions as parallel arrays.

    ``noise`` is None for datasets without ground truth. ``split`` is None until
    :func:`split_dataset` assigns TRAIN/VAL/TEST codes. ``user_ids``/``item_ids``
    map dense indices back to raw ids.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    noise: Optional[np.ndarray] = None
    split: Optional[np.ndarray] = None
    user_ids: Optional[np.ndarray] = None
    item_ids: Optional[np.ndarray] = None
    _adj: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.users)

    @property
    def has_flags(self):
        return self.noise is not None

    @property
    def labels(self):
        return np.ones(len(self), dtype=np.int8)

    def interaction(self, k):
        flag = None if self.noise is None else bool(self.noise[k])
        return Interaction(int(self.users[k]), int(self.items[k]), 1, flag)

    @property
    def interactions(self):
        return [self.interaction(k) for k in range(len(self))]

    def split_indices(self, which):
        if self.split is None:
            raise ValueError("table has not been split")
        return np.flatnonzero(self.split == which)

    def adjacency(self, which=TRAIN):
        """Adjacency of one split (or a tuple of splits)."""
        key = which if isinstance(which, tuple) else (which,)
        if key not in self._adj:
            mask = np.isin(self.split, key)
            self._adj[key] = Adjacency(self.users[mask], self.items[mask], self.num_users, self.num_items)
        return self._adj[key]

    def with_split(self, split):
        return InteractionTable(self.users, self.items, self.ratings, self.timestamps, self.num_users,
                                self.num_items, self.noise, split, self.user_ids, self.item_ids)


def label_noise_by_rating(ratings: Sequence[RawRating], threshold: int = 3) -> InteractionTable:
    """Turn every rating into an observed positive; ratings strictly below ``threshold`` are noisy."""
    if not ratings:
        z = np.zeros(0, dtype=np.int64)
        return InteractionTable(z, z.copy(), z.copy(), z.copy(), 0, 0, np.zeros(0, dtype=bool),
                                user_ids=z.copy(), item_ids=z.copy())
    raw_u = np.fromiter((r.user for r in ratings), dtype=np.int64, count=len(ratings))
    raw_i = np.fromiter((r.item for r in ratings), dtype=np.int64, count=len(ratings))
    rat = np.fromiter((r.rating for r in ratings), dtype=np.int64, count=len(ratings))
    ts = np.fromiter((r.timestamp if r.timestamp is not None else 0 for r in ratings),
                     dtype=np.int64, count=len(ratings))
    user_ids, users = np.unique(raw_u, return_inverse=True)
    item_ids, items = np.unique(raw_i, return_inverse=True)
    return InteractionTable(users.astype(np.int64), items.astype(np.int64), rat, ts,
                            len(user_ids), len(item_ids), noise=rat < threshold,
                            user_ids=user_ids, item_ids=item_ids)


def split_dataset(table: InteractionTable, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> InteractionTable:
    """Per-user random 8:1:1 split with a clean test set.

    Users with fewer than 3 interactions go entirely to train. When noise flags
    exist, noisy interactions drawn for the test split are moved to train so the
    splits still partition the table.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(table)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    order = order[np.argsort(table.users[order], kind="stable")]
    counts = np.bincount(table.users, minlength=table.num_users)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(n) - np.repeat(starts, counts)
    cnt = np.repeat(counts, counts)

    n_val = np.floor(cnt * ratios[1] + 0.5).astype(np.int64)
    n_test = np.floor(cnt * ratios[2] + 0.5).astype(np.int64)
    n_val = np.where(cnt < 3, 0, n_val)
    n_test = np.where(cnt < 3, 0, n_test)
    n_train = cnt - n_val - n_test
    split_sorted = np.full(n, TRAIN, dtype=np.int8)
    split_sorted[(pos >= n_train) & (pos < n_train + n_val)] = VAL
    split_sorted[pos >= n_train + n_val] = TEST
    split = np.empty(n, dtype=np.int8)
    split[order] = split_sorted

    if table.noise is not None:
        moved = (split == TEST) & table.noise
        split[moved] = TRAIN
        if moved.any() and not np.any(split == TEST):
            warnings.warn("clean test split is empty: every candidate test interaction is noisy",
                          RuntimeWarning, stacklevel=2)
    return table.with_split(split)


def inject_noise(clean: InteractionTable, sigma: float, seed: int = 0) -> InteractionTable:
    """Add uniformly drawn unobserved pairs to train as noisy positives.

    n = ceil(sigma * P / (1 - sigma)) pairs are added, P being the number of
    train positives, so noisy / all train positives equals sigma up to rounding.
    """
    if not 0 <= sigma < 1:
        raise ValueError(f"sigma must lie in [0, 1), got {sigma}")
    if clean.split is None:
        raise ValueError("split the table before injecting noise")
    noise = clean.noise if clean.noise is not None else np.zeros(len(clean), dtype=bool)
    train = clean.split == TRAIN
    if np.any(noise & train):
        raise ValueError("inject_noise expects a table without noisy train interactions")
    P = int(train.sum())
    n_add = max(0, math.ceil(sigma * P / (1.0 - sigma) - 1e-9))
    if n_add == 0:
        return clean
    U, I = clean.num_users, clean.num_items
    observed = np.unique(clean.users * I + clean.items)
    free = U * I - len(observed)
    if n_add > free:
        raise ValueError(f"need {n_add} unobserved pairs but only {free} exist")

    rng = np.random.default_rng(seed)
    chosen = np.zeros(0, dtype=np.int64)
    while len(chosen) < n_add:
        draw = rng.integers(0, U * I, size=max(2 * (n_add - len(chosen)), 64))
        draw = draw[~np.isin(draw, observed)]
        cand = np.concatenate([chosen, draw])
        _, first = np.unique(cand, return_index=True)
        chosen = cand[np.sort(first)]
    chosen = chosen[:n_add]

    zeros = np.zeros(n_add, dtype=np.int64)
    return InteractionTable(
        users=np.concatenate([clean.users, chosen // I]),
        items=np.concatenate([clean.items, chosen % I]),
        ratings=np.concatenate([clean.ratings, zeros]),
        timestamps=np.concatenate([clean.timestamps, zeros]),
        num_users=U, num_items=I,
        noise=np.concatenate([noise, np.ones(n_add, dtype=bool)]),
        split=np.concatenate([clean.split, np.full(n_add, TRAIN, dtype=np.int8)]),
        user_ids=clean.user_ids, item_ids=clean.item_ids,
    )


def synthesize_ratings(num_users=943, num_items=1683, num_interactions=100_000, rank=8,
                       strength=3.0, min_per_user=20, seed=0):
    """Clean MovieLens-shaped ratings drawn from a low-rank preference model.

    Users get a skewed activity level (at least ``min_per_user``), items a
    power-law popularity; each user picks items via Gumbel-top-k over
    ``strength * <p_u, q_i> + log popularity``. Ratings are 4 or 5 (top half of
    the user's picks by affinity get a 5), so :func:`label_noise_by_rating`
    leaves the result clean.
    """
    rng = np.random.default_rng(seed)
    act = rng.lognormal(0.0, 1.0, num_users)
    extra = num_interactions - min_per_user * num_users
    if extra < 0:
        raise ValueError("num_interactions too small for min_per_user")
    n_u = min_per_user + np.floor(act / act.sum() * extra).astype(np.int64)
    n_u = np.minimum(n_u, num_items // 2)
    short = num_interactions - n_u.sum()
    while short > 0:
        room = np.flatnonzero(n_u < num_items // 2)
        take = rng.choice(room, size=min(short, len(room)), replace=False)
        n_u[take] += 1
        short = num_interactions - n_u.sum()

    P = rng.standard_normal((num_users, rank)) / math.sqrt(rank)
    Q = rng.standard_normal((num_items, rank))
    pop = np.log(1.0 / np.arange(1, num_items + 1) ** 0.8)[rng.permutation(num_items)]
    out = []
    t = 0
    for u in range(num_users):
        aff = strength * (Q @ P[u]) + pop
        pert = aff + rng.gumbel(size=num_items)
        picked = np.argsort(-pert, kind="stable")[: n_u[u]]
        cut = np.median(aff[picked])
        for i in picked:
            out.append(RawRating(u, int(i), 5 if aff[i] >= cut else 4, t))
            t += 1
    return out


def export_table(table: InteractionTable, directory) -> Path:
    """Write ``train.tsv``/``val.tsv``/``test.tsv`` (user item rating timestamp noise_flag) plus meta.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    flags = table.noise if table.noise is not None else np.zeros(len(table), dtype=bool)
    split = table.split if table.split is not None else np.zeros(len(table), dtype=np.int8)
    for code, name in SPLIT_NAMES.items():
        idx = np.flatnonzero(split == code)
        with (directory / f"{name}.tsv").open("w", encoding="utf-8") as fh:
            for k in idx:
                fh.write(f"{table.users[k]}\t{table.items[k]}\t{table.ratings[k]}\t"
                         f"{table.timestamps[k]}\t{int(flags[k])}\n")
    meta = {
        "num_users": int(table.num_users),
        "num_items": int(table.num_items),
        "has_flags": table.noise is not None,
        "order": [int(x) for x in _split_order(split)],
    }
    (directory / "meta.json").write_text(json.dumps(meta))
    if table.user_ids is not None:
        np.savetxt(directory / "user_ids.txt", table.user_ids, fmt="%d")
    if table.item_ids is not None:
        np.savetxt(directory / "item_ids.txt", table.item_ids, fmt="%d")
    return directory


def _split_order(split):
    # original row position of each exported row, in file order train, val, test
    return np.concatenate([np.flatnonzero(split == c) for c in SPLIT_NAMES])


def load_table(directory) -> InteractionTable:
    """Inverse of :func:`export_table`; restores row order, flags and splits exactly."""
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{meta_path} not found (not a canonical dataset directory)")
    meta = json.loads(meta_path.read_text())
    cols, codes = [], []
    for code, name in SPLIT_NAMES.items():
        path = directory / f"{name}.tsv"
        rows = []
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 5:
                    raise ParseError(f"expected 5 fields, got {len(parts)}", line=lineno, path=path)
                try:
                    rows.append([int(p) for p in parts])
                except ValueError as exc:
                    raise ParseError(str(exc), line=lineno, path=path) from None
        arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
        cols.append(arr)
        codes.append(np.full(len(arr), code, dtype=np.int8))
    data = np.concatenate(cols)
    split = np.concatenate(codes)
    order = np.asarray(meta.get("order", np.arange(len(data))), dtype=np.int64)
    inv = np.empty(len(order), dtype=np.int64)
    inv[order] = np.arange(len(order))
    data, split = data[inv], split[inv]
    uid = directory / "user_ids.txt"
    iid = directory / "item_ids.txt"
    return InteractionTable(
        users=data[:, 0].copy(), items=data[:, 1].copy(), ratings=data[:, 2].copy(),
        timestamps=data[:, 3].copy(), num_users=meta["num_users"], num_items=meta["num_items"],
        noise=data[:, 4].astype(bool) if meta["has_flags"] else None, split=split,
        user_ids=np.atleast_1d(np.loadtxt(uid, dtype=np.int64)) if uid.exists() else None,
        item_ids=np.atleast_1d(np.loadtxt(iid, dtype=np.int64)) if iid.exists() else None,
    )
