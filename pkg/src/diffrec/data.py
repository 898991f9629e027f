"""Interaction ingestion, chronological splitting and noise regimes.

Input is a UTF-8 TSV with ``user, item, rating, timestamp`` columns (an
optional header line is skipped). The MovieLens ``::``-separated
``ratings.dat`` layout is accepted with ``fmt="dat"``. Ratings may be
replaced by an unrated marker (``-`` or empty), in which case the record is
always treated as a positive.

All regimes share one vocabulary whose prefix covers the clean (rating >= 4)
entities, so user/item indices, and therefore the test files, are identical
across regimes built from the same source.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

POSITIVE_RATING = 4.0
UNRATED = {"", "-", "na", "nan", "none", "null"}
HEADER_TOKENS = {"user", "user_id", "userid", "uid", "u"}


@dataclass(frozen=True)
class RawInteraction:
    user: str
    item: str
    rating: Optional[float]
    timestamp: Optional[int]
    line: int

    @property
    def positive(self) -> bool:
        return self.rating is None or self.rating >= POSITIVE_RATING


@dataclass
class Dataset:
    """Deduplicated records plus the shared vocabularies."""

    records: List[RawInteraction]
    users: List[str]
    items: List[str]
    n_clean_users: int
    n_clean_items: int
    malformed: List[Tuple[int, str]] = field(default_factory=list)
    duplicates: int = 0

    @property
    def has_timestamps(self) -> bool:
        return all(r.timestamp is not None for r in self.records)


# ------------------------------------------------------------------ ingest

def _token_key(tokens):
    if all(t.isdigit() for t in tokens):
        return lambda t: (len(t.lstrip("0")), t.lstrip("0"), t)
    return lambda t: t


def _sorted_tokens(tokens) -> List[str]:
    tokens = list(tokens)
    return sorted(tokens, key=_token_key(tokens))


def ingest(path, fmt: str = "tsv") -> Dataset:
    """Parse an interaction file.

    Malformed lines are skipped and reported (with 1-based line numbers) in
    ``Dataset.malformed``. Duplicate (user, item) pairs keep the record with
    the latest timestamp; on equal timestamps the later line wins.
    """
    if fmt not in ("tsv", "dat"):
        raise ConfigError(f"unknown input format {fmt!r}")
    sep = "\t" if fmt == "tsv" else "::"
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc

    records: Dict[Tuple[str, str], RawInteraction] = {}
    malformed: List[Tuple[int, str]] = []
    duplicates = 0
    first = True
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        parts = [p.strip() for p in line.split(sep)]
        if first:
            first = False
            if parts[0].lower() in HEADER_TOKENS:
                if len(parts) < 3:
                    raise DataError(f"{path}:{lineno}: malformed header {line!r}")
                continue
        rec = _parse_fields(parts, lineno)
        if isinstance(rec, str):
            malformed.append((lineno, rec))
            continue
        key = (rec.user, rec.item)
        old = records.get(key)
        if old is not None:
            duplicates += 1
            if (rec.timestamp or 0) < (old.timestamp or 0):
                continue
        records[key] = rec

    for lineno, msg in malformed[:20]:
        log.warning("%s:%d: skipped malformed line (%s)", path, lineno, msg)
    if len(malformed) > 20:
        log.warning("%s: %d more malformed lines", path, len(malformed) - 20)
    if duplicates:
        log.info("%s: %d duplicate (user, item) records resolved to latest timestamp", path, duplicates)
    recs = sorted(records.values(), key=lambda r: r.line)
    if not recs:
        log.warning("%s: no interactions found", path)
    return _with_vocab(recs, malformed, duplicates)


def _parse_fields(parts: List[str], lineno: int):
    if len(parts) not in (3, 4):
        return f"expected 3 or 4 fields, got {len(parts)}"
    user, item = parts[0], parts[1]
    if not user or not item:
        return "empty user or item token"
    r = parts[2]
    if r.lower() in UNRATED:
        rating = None
    else:
        try:
            rating = float(r)
        except ValueError:
            return f"bad rating {r!r}"
        if not 0.5 <= rating <= 5.0:
            return f"rating {rating} outside [0.5, 5]"
    ts = None
    if len(parts) == 4:
        try:
            ts = int(parts[3])
        except ValueError:
            return f"bad timestamp {parts[3]!r}"
    return RawInteraction(user, item, rating, ts, lineno)


def _with_vocab(recs: List[RawInteraction], malformed, duplicates) -> Dataset:
    clean_u = {r.user for r in recs if r.positive}
    clean_i = {r.item for r in recs if r.positive}
    users = _sorted_tokens(clean_u) + _sorted_tokens({r.user for r in recs} - clean_u)
    items = _sorted_tokens(clean_i) + _sorted_tokens({r.item for r in recs} - clean_i)
    return Dataset(recs, users, items, len(clean_u), len(clean_i), malformed, duplicates)


def dataset_from_records(recs: Sequence[RawInteraction]) -> Dataset:
    return _with_vocab(list(recs), [], 0)


# -------------------------------------------------------- interaction matrix

@dataclass
class InteractionMatrix:
    """Sparse user x item interactions.

    Entries are stored grouped by user and, within a user, in chronological
    order (ties keep their input order), so ``sequence(u)`` is simply the
    user's slice.
    """

    n_users: int
    n_items: int
    users: np.ndarray
    items: np.ndarray
    weights: np.ndarray
    timestamps: np.ndarray
    indptr: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        n = len(self.users)
        if not (len(self.items) == len(self.weights) == len(self.timestamps) == n):
            raise DataError("interaction arrays have different lengths")
        if n and (self.users.min() < 0 or self.users.max() >= self.n_users
                  or self.items.min() < 0 or self.items.max() >= self.n_items):
            raise DataError("interaction index out of bounds")
        if n and np.any(np.diff(self.users) < 0):
            raise DataError("interactions must be grouped by user")
        self.indptr = np.searchsorted(self.users, np.arange(self.n_users + 1))

    @classmethod
    def from_arrays(cls, n_users, n_items, users, items, weights=None, timestamps=None,
                    order=None) -> "InteractionMatrix":
        """Builds a matrix, sorting by (user, timestamp, order); ``order``
        defaults to the input position."""
        users = np.asarray(users, dtype=np.int64)
        n = len(users)
        items = np.asarray(items, dtype=np.int64)
        weights = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
        timestamps = np.zeros(n, dtype=np.int64) if timestamps is None else np.asarray(timestamps, dtype=np.int64)
        order = np.arange(n) if order is None else np.asarray(order)
        perm = np.lexsort((order, timestamps, users))
        pairs = users[perm] * max(n_items, 1) + items[perm]
        if len(np.unique(pairs)) != n:
            raise DataError("duplicate (user, item) pair in interaction matrix")
        return cls(n_users, n_items, users[perm], items[perm], weights[perm], timestamps[perm])

    @classmethod
    def empty(cls, n_users, n_items) -> "InteractionMatrix":
        z = np.zeros(0, dtype=np.int64)
        return cls(n_users, n_items, z, z, np.zeros(0), z)

    @property
    def nnz(self) -> int:
        return len(self.users)

    def degree(self) -> np.ndarray:
        return np.diff(self.indptr)

    def row(self, u: int) -> np.ndarray:
        return self.items[self.indptr[u]:self.indptr[u + 1]]

    def sequence(self, u: int):
        lo, hi = self.indptr[u], self.indptr[u + 1]
        return self.items[lo:hi], self.timestamps[lo:hi]

    def csr(self) -> sp.csr_matrix:
        m = sp.csr_matrix((self.weights, (self.users, self.items)), shape=(self.n_users, self.n_items))
        m.sort_indices()
        return m

    def dense(self, rows=None) -> np.ndarray:
        m = self.csr()
        if rows is not None:
            m = m[np.asarray(rows)]
        return m.toarray()

    def with_weights(self, weights) -> "InteractionMatrix":
        return InteractionMatrix(self.n_users, self.n_items, self.users, self.items,
                                 np.asarray(weights, dtype=np.float64), self.timestamps)

    def merge(self, other: "InteractionMatrix") -> "InteractionMatrix":
        """Union of two disjoint matrices; ``self`` entries precede ``other``
        entries on equal timestamps."""
        if (self.n_users, self.n_items) != (other.n_users, other.n_items):
            raise DataError("cannot merge matrices of different shapes")
        n = self.nnz
        return InteractionMatrix.from_arrays(
            self.n_users, self.n_items,
            np.concatenate([self.users, other.users]),
            np.concatenate([self.items, other.items]),
            np.concatenate([self.weights, other.weights]),
            np.concatenate([self.timestamps, other.timestamps]),
            order=np.arange(n + other.nnz),
        )

    def pairs(self) -> set:
        return set(zip(self.users.tolist(), self.items.tolist()))


@dataclass
class SplitBundle:
    train: InteractionMatrix
    val: InteractionMatrix
    test: InteractionMatrix
    regime: str
    users: List[str]
    items: List[str]
    manifest: Dict[str, object]
    injected: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.train.n_users

    @property
    def n_items(self) -> int:
        return self.train.n_items

    @property
    def temporal(self) -> bool:
        return self.regime == "temporal"


# -------------------------------------------------------------- splitting

def split_sizes(n: int, ratios: Sequence[float]) -> List[int]:
    """Floor each share, then hand the remainder out by largest fractional
    part (earlier split wins ties). 9 at 7:1:2 gives (6, 1, 2)."""
    fr = [Fraction(str(r)) for r in ratios]
    if any(f < 0 for f in fr) or abs(float(sum(fr)) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    total = sum(fr)
    exact = [f / total * n for f in fr]
    sizes = [math.floor(e) for e in exact]
    rest = n - sum(sizes)
    by_frac = sorted(range(len(fr)), key=lambda i: (-(exact[i] - sizes[i]), i))
    for i in by_frac[:rest]:
        sizes[i] += 1
    return sizes


def _chrono(recs: Sequence[RawInteraction]) -> List[RawInteraction]:
    return sorted(recs, key=lambda r: ((r.timestamp if r.timestamp is not None else 0), r.line))


def _check_timestamps(ds: Dataset, regime: str) -> None:
    if ds.has_timestamps:
        return
    if regime == "temporal":
        raise ConfigError("temporal regime requires a timestamp column on every interaction")
    if any(r.timestamp is not None for r in ds.records):
        raise DataError("timestamps present on some interactions but not others")
    log.warning("no timestamps in input; falling back to file line order for the chronological split")


def _matrix(recs: Sequence[RawInteraction], uidx, iidx, n_users, n_items, weights=None) -> InteractionMatrix:
    if not recs:
        return InteractionMatrix.empty(n_users, n_items)
    u = np.array([uidx[r.user] for r in recs])
    i = np.array([iidx[r.item] for r in recs])
    ts = np.array([r.timestamp if r.timestamp is not None else 0 for r in recs])
    return InteractionMatrix.from_arrays(n_users, n_items, u, i, weights, ts, order=np.arange(len(recs)))


def _clean_parts(ds: Dataset, ratios):
    pos = _chrono([r for r in ds.records if r.positive])
    if not pos:
        raise DataError("no interactions with rating >= 4 remain after filtering")
    n_tr, n_va, _ = split_sizes(len(pos), ratios)
    return pos, pos[:n_tr], pos[n_tr:n_tr + n_va], pos[n_tr + n_va:]


def _bundle(ds, regime, tr, va, te, n_users, n_items, manifest, seed, ratios, weights_tr=None):
    uidx = {u: k for k, u in enumerate(ds.users[:n_users])}
    iidx = {it: k for k, it in enumerate(ds.items[:n_items])}
    train = _matrix(tr, uidx, iidx, n_users, n_items, weights_tr)
    val = _matrix(va, uidx, iidx, n_users, n_items)
    test = _matrix(te, uidx, iidx, n_users, n_items)
    has_train = train.degree() > 0
    man = {
        "regime": regime,
        "seed": seed,
        "ratios": ":".join(str(r) for r in ratios),
        "split": "global-chronological",
        "users": n_users,
        "items": n_items,
        "train": train.nnz,
        "val": val.nnz,
        "test": test.nnz,
        "test_users": int((test.degree() > 0).sum()),
        "cold_val_users": int(((val.degree() > 0) & ~has_train).sum()),
        "cold_test_users": int(((test.degree() > 0) & ~has_train & ~(val.degree() > 0)).sum()),
        "timestamps": "yes" if ds.has_timestamps else "line-order",
    }
    man.update(manifest)
    return SplitBundle(train, val, test, regime, list(ds.users[:n_users]), list(ds.items[:n_items]), man)


def split_clean(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitBundle:
    """Drop ratings < 4, sort globally by time, cut 7:1:2."""
    _check_timestamps(ds, "clean")
    _, tr, va, te = _clean_parts(ds, ratios)
    return _bundle(ds, "clean", tr, va, te, ds.n_clean_users, ds.n_clean_items, {}, seed, ratios)


def split_temporal(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitBundle:
    """Clean membership; train/val rows keep their timestamp order for reweighting."""
    _check_timestamps(ds, "temporal")
    _, tr, va, te = _clean_parts(ds, ratios)
    return _bundle(ds, "temporal", tr, va, te, ds.n_clean_users, ds.n_clean_items, {}, seed, ratios)


def split_natural_noise(ds: Dataset, ratios=(0.7, 0.1, 0.2), seed: int = 0) -> SplitBundle:
    """Clean test set; train/val additionally draw on sub-4 ratings from the
    same time windows, downsampled uniformly to the clean train/val sizes."""
    _check_timestamps(ds, "natural")
    pos, tr, va, te = _clean_parts(ds, ratios)
    key = lambda r: ((r.timestamp if r.timestamp is not None else 0), r.line)
    val_start = key(va[0]) if va else (key(te[0]) if te else (math.inf,))
    test_start = key(te[0]) if te else (math.inf,)
    everything = _chrono(ds.records)
    cand_tr = [r for r in everything if key(r) < val_start]
    cand_va = [r for r in everything if val_start <= key(r) < test_start]
    rng = np.random.default_rng(seed)
    ntr = _downsample(cand_tr, len(tr), rng)
    nva = _downsample(cand_va, len(va), rng)
    man = {"clean_train": len(tr), "clean_val": len(va), "noisy_candidates_train": len(cand_tr),
           "noisy_candidates_val": len(cand_va)}
    return _bundle(ds, "natural", ntr, nva, te, len(ds.users), len(ds.items), man, seed, ratios)


def _downsample(recs, target, rng):
    if len(recs) <= target:
        return list(recs)
    keep = np.sort(rng.choice(len(recs), size=target, replace=False))
    return [recs[k] for k in keep]


def inject_random_noise(bundle: SplitBundle, p: float, seed: int = 0) -> SplitBundle:
    """Add ``round(p * train_degree)`` never-interacted items to each user's
    train row (round half up). Val and test are untouched. Injected entries
    carry the user's latest train timestamp."""
    if not 0.0 <= p <= 1.0:
        raise ConfigError(f"noise proportion must lie in [0, 1], got {p}")
    if bundle.regime not in ("clean", "temporal"):
        raise ConfigError("random noise is injected into a clean bundle")
    rng = np.random.default_rng(seed)
    tr, va, te = bundle.train, bundle.val, bundle.test
    seen = [set() for _ in range(bundle.n_users)]
    for m in (tr, va, te):
        for u, i in zip(m.users.tolist(), m.items.tolist()):
            seen[u].add(i)
    deg = tr.degree()
    injected: List[Tuple[int, int]] = []
    skipped = 0
    add_u, add_i, add_t = [], [], []
    for u in range(bundle.n_users):
        k = int(math.floor(p * deg[u] + 0.5))
        if k == 0:
            continue
        free = np.setdiff1d(np.arange(bundle.n_items), np.fromiter(seen[u], dtype=np.int64), assume_unique=True)
        if len(free) == 0:
            skipped += 1
            log.warning("user %d has interacted with every item; no noise injected", u)
            continue
        if len(free) < k:
            log.warning("user %d: only %d free items for %d requested", u, len(free), k)
            k = len(free)
        picks = np.sort(rng.choice(free, size=k, replace=False))
        last_ts = int(tr.sequence(u)[1].max())
        for i in picks.tolist():
            add_u.append(u)
            add_i.append(i)
            add_t.append(last_ts)
            injected.append((u, i))
    n0 = tr.nnz
    train = InteractionMatrix.from_arrays(
        tr.n_users, tr.n_items,
        np.concatenate([tr.users, np.array(add_u, dtype=np.int64)]),
        np.concatenate([tr.items, np.array(add_i, dtype=np.int64)]),
        np.concatenate([tr.weights, np.ones(len(add_u))]),
        np.concatenate([tr.timestamps, np.array(add_t, dtype=np.int64)]),
        order=np.arange(n0 + len(add_u)),
    )
    man = dict(bundle.manifest)
    man.update({"regime": f"random({p:g})", "noise_p": p, "noise_seed": seed,
                "injected": len(injected), "noise_skipped_users": skipped, "train": train.nnz})
    return SplitBundle(train, va, te, f"random({p:g})", bundle.users, bundle.items, man, injected)


def prepare(ds: Dataset, regime: str, seed: int = 0, ratios=(0.7, 0.1, 0.2)) -> SplitBundle:
    """Dispatch on a regime name: clean, natural, temporal or random(p)."""
    regime = regime.strip().lower()
    if regime == "clean":
        return split_clean(ds, ratios, seed)
    if regime in ("natural", "natural_noise"):
        return split_natural_noise(ds, ratios, seed)
    if regime == "temporal":
        return split_temporal(ds, ratios, seed)
    p = parse_random_regime(regime)
    if p is not None:
        return inject_random_noise(split_clean(ds, ratios, seed), p, seed)
    raise ConfigError(f"unknown regime {regime!r}; expected clean, natural, temporal or random(p)")


def parse_random_regime(regime: str) -> Optional[float]:
    for prefix in ("random(", "random_noise("):
        if regime.startswith(prefix) and regime.endswith(")"):
            try:
                return float(regime[len(prefix):-1])
            except ValueError as exc:
                raise ConfigError(f"bad noise proportion in {regime!r}") from exc
    if regime.startswith("random:"):
        try:
            return float(regime.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad noise proportion in {regime!r}") from exc
    return None


# --------------------------------------------------------------------- io

def _fmt(x) -> str:
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def write_manifest(path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k in sorted(manifest):
            fh.write(f"{k}={_fmt(manifest[k])}\n")


def read_kv(path) -> Dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def write_matrix(path, m: InteractionMatrix) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, w, t in zip(m.users.tolist(), m.items.tolist(), m.weights.tolist(), m.timestamps.tolist()):
            fh.write(f"{u}\t{i}\t{_fmt(w)}\t{t}\n")


def read_matrix(path, n_users: int, n_items: int) -> InteractionMatrix:
    u, i, w, t = [], [], [], []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields")
        try:
            u.append(int(parts[0]))
            i.append(int(parts[1]))
            w.append(float(parts[2]))
            t.append(int(parts[3]))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return InteractionMatrix.from_arrays(n_users, n_items, u, i, w, t)


def write_vocab(path, tokens: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, tok in enumerate(tokens):
            fh.write(f"{k}\t{tok}\n")


def read_vocab(path) -> List[str]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        k, _, tok = line.partition("\t")
        if int(k) != len(out):
            raise DataError(f"{path}:{lineno}: vocabulary indices must be dense and ordered")
        out.append(tok)
    return out


def write_bundle(bundle: SplitBundle, out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_matrix(out / "train.tsv", bundle.train)
        write_matrix(out / "val.tsv", bundle.val)
        write_matrix(out / "test.tsv", bundle.test)
        write_vocab(out / "vocab_users.tsv", bundle.users)
        write_vocab(out / "vocab_items.tsv", bundle.items)
        if bundle.injected:
            with open(out / "injected.tsv", "w", encoding="utf-8", newline="\n") as fh:
                for u, i in bundle.injected:
                    fh.write(f"{u}\t{i}\n")
        write_manifest(out / "manifest", bundle.manifest)
    except OSError as exc:
        raise DataError(f"cannot write bundle to {out}: {exc}") from exc
    return out


def read_bundle(path) -> SplitBundle:
    d = Path(path)
    if not (d / "manifest").exists():
        raise DataError(f"{d} is not a prepared bundle (no manifest)")
    man = read_kv(d / "manifest")
    users = read_vocab(d / "vocab_users.tsv")
    items = read_vocab(d / "vocab_items.tsv")
    nu, ni = len(users), len(items)
    injected = []
    if (d / "injected.tsv").exists():
        for line in (d / "injected.tsv").read_text().splitlines():
            if line:
                a, b = line.split("\t")
                injected.append((int(a), int(b)))
    return SplitBundle(read_matrix(d / "train.tsv", nu, ni), read_matrix(d / "val.tsv", nu, ni),
                       read_matrix(d / "test.tsv", nu, ni), man.get("regime", "clean"),
                       users, items, man, injected)
