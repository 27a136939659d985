"""Weekly snapshot series over a fixed parlor node universe.

Nodes are distinct (parlor_name, address_canon) keys. Each window gets a
typed edge set; adjacency matrices are stored in CSR form and normalized as
D^-1/2 (A + I) D^-1/2 only when a model needs them.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .ingest import EntityRecord, format_timestamp, parse_timestamp

logger = logging.getLogger(__name__)

EDGE_KINDS = ("same_county", "shared_phone", "shared_address", "alias_mobility")
KIND_CODE = {k: i for i, k in enumerate(EDGE_KINDS)}
RULE_PRESETS: dict[str, tuple[str, ...]] = {
    # edges between every pair of parlors in one county
    "county": ("same_county",),
    "relational": ("shared_phone", "shared_address", "alias_mobility"),
    "all": EDGE_KINDS,
}
DEFAULT_RULES = "relational"
LABEL_CODE = {"raided": 1, "not_raided": 0, "unlabeled": -1}


class ConfigError(ValueError):
    pass


def resolve_rules(rules: str | Iterable[str]) -> tuple[str, ...]:
    if isinstance(rules, str):
        if rules in RULE_PRESETS:
            return RULE_PRESETS[rules]
        rules = [r.strip() for r in rules.split(",") if r.strip()]
    rules = tuple(rules)
    bad = [r for r in rules if r not in KIND_CODE]
    if bad:
        raise ConfigError(f"unknown edge rule(s): {bad}")
    return rules


# -- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class WindowSpec:
    start: datetime
    width: timedelta = timedelta(days=7)

    def __post_init__(self):
        if self.width <= timedelta(0):
            raise ConfigError("window width must be positive")
        if self.start.tzinfo is None:
            object.__setattr__(self, "start", self.start.replace(tzinfo=timezone.utc))

    @classmethod
    def covering(cls, records: Sequence[EntityRecord], width: timedelta = timedelta(days=7)):
        """Start at midnight UTC of the earliest record."""
        first = min(r.timestamp for r in records)
        return cls(first.replace(hour=0, minute=0, second=0, microsecond=0), width)

    def index_of(self, ts: datetime) -> int:
        if ts < self.start:
            raise ConfigError(f"timestamp {format_timestamp(ts)} precedes window start")
        return int((ts - self.start) // self.width)

    def to_dict(self) -> dict:
        return {"start": format_timestamp(self.start), "width_seconds": self.width.total_seconds()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "WindowSpec":
        return cls(parse_timestamp(d["start"]), timedelta(seconds=float(d["width_seconds"])))


def bucket_snapshots(records: Sequence[EntityRecord], spec: WindowSpec) -> tuple[np.ndarray, int]:
    """Window index of every record and the snapshot count T."""
    windows = np.fromiter((spec.index_of(r.timestamp) for r in records), dtype=np.int64, count=len(records))
    T = int(windows.max()) + 1 if len(windows) else 0
    return windows, T


# -- nodes -------------------------------------------------------------------


@dataclass
class NodeTable:
    keys: list[tuple[str, str]]
    county: list[str]
    owner_ethnicity: list[str | None]
    review_count: np.ndarray
    hourly_rate_usd: np.ndarray  # nan when never observed
    num_local_raids: np.ndarray  # nan when never observed
    label: list[str]
    index: dict[tuple[str, str], int] = field(init=False, repr=False)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate parlor keys")

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def y(self) -> np.ndarray:
        """1 raided, 0 not raided, -1 unlabeled."""
        return np.array([LABEL_CODE[l] for l in self.label], dtype=np.int64)

    def node_ids(self, records: Iterable[EntityRecord]) -> np.ndarray:
        return np.array([self.index[r.parlor_key] for r in records], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["node_id", "parlor_name", "address_canon", "county", "label",
                        "review_count", "hourly_rate_usd", "num_local_raids", "owner_ethnicity"])
            for i, (name, addr) in enumerate(self.keys):
                w.writerow([i, name, addr, self.county[i], self.label[i], int(self.review_count[i]),
                            _num_cell(self.hourly_rate_usd[i]), _num_cell(self.num_local_raids[i]),
                            self.owner_ethnicity[i] or ""])

    @classmethod
    def load(cls, path: str | Path) -> "NodeTable":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for i, row in enumerate(rows):
            if int(row["node_id"]) != i:
                raise ValueError(f"{path}: node ids must be dense and ordered")
        return cls(
            keys=[(r["parlor_name"], r["address_canon"]) for r in rows],
            county=[r["county"] for r in rows],
            owner_ethnicity=[r["owner_ethnicity"] or None for r in rows],
            review_count=np.array([int(r["review_count"]) for r in rows], dtype=np.int64),
            hourly_rate_usd=np.array([_num_parse(r["hourly_rate_usd"]) for r in rows], dtype=float),
            num_local_raids=np.array([_num_parse(r["num_local_raids"]) for r in rows], dtype=float),
            label=[r["label"] for r in rows],
        )


def _num_cell(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def _num_parse(s: str) -> float:
    return float(s) if s else math.nan


def build_nodes(records: Sequence[EntityRecord]) -> NodeTable:
    """One node per distinct parlor key, in order of first appearance.

    Attribute aggregation does not depend on record order: county comes
    from the earliest record, ethnicity and hourly rate from the latest
    (ties broken by value), review count is the max, raids are summed.
    """
    order: dict[tuple[str, str], int] = {}
    county: list[tuple | None] = []
    ethnicity: list[tuple | None] = []
    reviews: list[int] = []
    rate: list[tuple | None] = []
    raids: list[float] = []
    raided: list[bool] = []
    cleared: list[bool] = []

    for rec in records:
        i = order.get(rec.parlor_key)
        if i is None:
            i = order[rec.parlor_key] = len(county)
            county.append(None)
            ethnicity.append(None)
            reviews.append(0)
            rate.append(None)
            raids.append(math.nan)
            raided.append(False)
            cleared.append(False)
        ts = rec.timestamp
        if rec.county and (county[i] is None or (ts, rec.county) < county[i]):
            county[i] = (ts, rec.county)
        if rec.owner_ethnicity and (ethnicity[i] is None or (ts, rec.owner_ethnicity) > ethnicity[i]):
            ethnicity[i] = (ts, rec.owner_ethnicity)
        reviews[i] = max(reviews[i], rec.review_count)
        if rec.hourly_rate_usd is not None and (rate[i] is None or (ts, rec.hourly_rate_usd) > rate[i]):
            rate[i] = (ts, rec.hourly_rate_usd)
        if rec.num_local_raids is not None:
            raids[i] = (0.0 if math.isnan(raids[i]) else raids[i]) + rec.num_local_raids
        if rec.source_kind == "raid_report":
            raided[i] |= rec.label == "raided"
            cleared[i] |= rec.label == "not_raided"

    keys = list(order)
    labels = []
    for i, key in enumerate(keys):
        if raided[i] and cleared[i]:
            logger.warning("conflicting raid labels for %r; keeping raided", key)
        labels.append("raided" if raided[i] else "not_raided" if cleared[i] else "unlabeled")
    return NodeTable(
        keys=keys,
        county=[c[1] if c else "" for c in county],
        owner_ethnicity=[e[1] if e else None for e in ethnicity],
        review_count=np.array(reviews, dtype=np.int64),
        hourly_rate_usd=np.array([r[1] if r else math.nan for r in rate], dtype=float),
        num_local_raids=np.array(raids, dtype=float),
        label=labels,
    )


# -- edges -------------------------------------------------------------------


@dataclass
class EdgeSet:
    src: np.ndarray
    dst: np.ndarray
    kind: np.ndarray
    weight: np.ndarray

    @classmethod
    def empty(cls) -> "EdgeSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), np.zeros(0, dtype=np.int8), np.zeros(0, dtype=float))

    @classmethod
    def from_tuples(cls, edges: Iterable[tuple[int, int, str, float]]) -> "EdgeSet":
        edges = sorted((int(s), int(d), KIND_CODE[k], float(w)) for s, d, k, w in edges)
        if not edges:
            return cls.empty()
        s, d, k, w = zip(*edges)
        return cls(np.array(s, dtype=np.int64), np.array(d, dtype=np.int64),
                   np.array(k, dtype=np.int8), np.array(w, dtype=float))

    def __len__(self) -> int:
        return len(self.src)

    def typed(self) -> set[tuple[int, int, str, float]]:
        return {(int(s), int(d), EDGE_KINDS[k], float(w))
                for s, d, k, w in zip(self.src, self.dst, self.kind, self.weight)}

    def of_kind(self, kind: str) -> "EdgeSet":
        m = self.kind == KIND_CODE[kind]
        return EdgeSet(self.src[m], self.dst[m], self.kind[m], self.weight[m])


def _pairs(members: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All ordered pairs (u, v), u != v."""
    n = len(members)
    u = np.repeat(members, n)
    v = np.tile(members, n)
    keep = u != v
    return u[keep], v[keep]


def _group(pairs: Iterable[tuple[object, int]]) -> dict[object, set[int]]:
    groups: dict[object, set[int]] = defaultdict(set)
    for key, node in pairs:
        if key:
            groups[key].add(node)
    return groups


def _witness_edges(groups: Mapping[object, set[int]], kind: str, out: dict) -> None:
    for witness, members in groups.items():
        if len(members) < 2:
            continue
        for u in members:
            for v in members:
                if u != v:
                    out.setdefault((u, v, kind), set()).add(witness)


def derive_edges(
    nodes: NodeTable,
    records: Sequence[EntityRecord],
    rules: str | Iterable[str] = DEFAULT_RULES,
    previous: Sequence[EntityRecord] = (),
) -> EdgeSet:
    """Typed edges for one window.

    `previous` holds the prior window's records; an alias seen there at u
    and in this window at v yields the lagged mobility edge u->v.
    """
    ids = nodes.node_ids(records)
    prev_ids = nodes.node_ids(previous)
    return _derive(
        nodes,
        ids,
        [r.phone_canon for r in records],
        [r.address_canon for r in records],
        [r.alias for r in records],
        prev_ids,
        [r.alias for r in previous],
        resolve_rules(rules),
    )


def _derive(nodes, ids, phones, addrs, aliases, prev_ids, prev_aliases, rules) -> EdgeSet:
    witnessed: dict[tuple[int, int, str], set] = {}
    if "shared_phone" in rules:
        _witness_edges(_group(zip(phones, ids.tolist())), "shared_phone", witnessed)
    if "shared_address" in rules:
        _witness_edges(_group(zip(addrs, ids.tolist())), "shared_address", witnessed)
    if "alias_mobility" in rules:
        cur = _group(zip(aliases, ids.tolist()))
        prev = _group(zip(prev_aliases, prev_ids.tolist()))
        for alias, here in cur.items():
            sources = here | prev.get(alias, set())
            for u in sources:
                for v in here:
                    if u != v:
                        witnessed.setdefault((u, v, "alias_mobility"), set()).add(alias)

    parts = []
    if witnessed:
        keys = sorted(witnessed)
        parts.append(EdgeSet(
            np.array([k[0] for k in keys], dtype=np.int64),
            np.array([k[1] for k in keys], dtype=np.int64),
            np.array([KIND_CODE[k[2]] for k in keys], dtype=np.int8),
            np.array([float(len(witnessed[k])) for k in keys]),
        ))
    if "same_county" in rules and len(ids):
        present = np.unique(ids)
        county = np.array([nodes.county[i] for i in present], dtype=object)
        for c in sorted(set(county.tolist())):
            if not c:
                continue
            u, v = _pairs(present[county == c])
            if len(u):
                parts.append(EdgeSet(u, v, np.full(len(u), KIND_CODE["same_county"], dtype=np.int8),
                                     np.ones(len(u))))
    return _concat_sorted(parts)


def _concat_sorted(parts: list[EdgeSet]) -> EdgeSet:
    if not parts:
        return EdgeSet.empty()
    src = np.concatenate([p.src for p in parts])
    dst = np.concatenate([p.dst for p in parts])
    kind = np.concatenate([p.kind for p in parts])
    weight = np.concatenate([p.weight for p in parts])
    order = np.lexsort((kind, dst, src))
    return EdgeSet(src[order], dst[order], kind[order], weight[order])


# -- series ------------------------------------------------------------------


@dataclass
class SnapshotSeries:
    window_spec: WindowSpec
    snapshots: list[EdgeSet]
    rules: tuple[str, ...] = RULE_PRESETS[DEFAULT_RULES]

    @property
    def T(self) -> int:
        return len(self.snapshots)

    def n_edges(self) -> int:
        return sum(len(s) for s in self.snapshots)

    def save(self, directory: str | Path, nodes: NodeTable | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        if nodes is not None:
            nodes.save(directory / "nodes.csv")
        for k, snap in enumerate(self.snapshots):
            with open(directory / f"edges_{k:04d}.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["src", "dst", "kind", "weight"])
                for s, d, kc, wt in zip(snap.src, snap.dst, snap.kind, snap.weight):
                    w.writerow([int(s), int(d), EDGE_KINDS[kc], repr(float(wt))])
        manifest = {"window_spec": self.window_spec.to_dict(), "T": self.T, "rules": list(self.rules),
                    "n_nodes": len(nodes) if nodes is not None else None, "n_edges": self.n_edges()}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "SnapshotSeries":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        snaps = []
        for k in range(int(manifest["T"])):
            with open(directory / f"edges_{k:04d}.csv", newline="", encoding="utf-8") as fh:
                snaps.append(EdgeSet.from_tuples(
                    (r["src"], r["dst"], r["kind"], r["weight"]) for r in csv.DictReader(fh)))
        return cls(WindowSpec.from_dict(manifest["window_spec"]), snaps, tuple(manifest["rules"]))


def build_series(
    records: Sequence[EntityRecord],
    nodes: NodeTable,
    spec: WindowSpec,
    rules: str | Iterable[str] = DEFAULT_RULES,
    windows: np.ndarray | None = None,
    T: int | None = None,
) -> SnapshotSeries:
    """Edge sets for every window in [0, T); empty windows give empty sets."""
    rules = resolve_rules(rules)
    if windows is None:
        windows, T_seen = bucket_snapshots(records, spec)
        T = T if T is not None else T_seen
    T = int(T if T is not None else windows.max() + 1)
    ids = nodes.node_ids(records)
    phones = np.array([r.phone_canon for r in records], dtype=object)
    addrs = np.array([r.address_canon for r in records], dtype=object)
    aliases = np.array([r.alias for r in records], dtype=object)

    order = np.argsort(windows, kind="stable")
    bounds = np.searchsorted(windows[order], np.arange(T + 1))
    by_window = [order[bounds[k]:bounds[k + 1]] for k in range(T)]
    empty = np.zeros(0, dtype=np.int64)
    snaps = []
    for k in range(T):
        sel = by_window[k]
        prev = by_window[k - 1] if k > 0 else empty
        snaps.append(_derive(nodes, ids[sel], phones[sel].tolist(), addrs[sel].tolist(),
                             aliases[sel].tolist(), ids[prev], aliases[prev].tolist(), rules))
    return SnapshotSeries(spec, snaps, rules)


# -- adjacency ---------------------------------------------------------------


@dataclass
class SparseAdjacency:
    matrix: sp.csr_matrix
    normalized: bool = False

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def indptr(self) -> np.ndarray:
        return self.matrix.indptr

    @property
    def indices(self) -> np.ndarray:
        return self.matrix.indices

    @property
    def data(self) -> np.ndarray:
        return self.matrix.data

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def with_self_loops(self) -> "SparseAdjacency":
        """Structure plus a stored diagonal; existing diagonal weights are kept."""
        m = self.matrix.tolil(copy=True)
        diag = m.diagonal()
        m.setdiag(np.where(diag > 0, diag, 1.0))
        out = m.tocsr()
        out.sort_indices()
        return SparseAdjacency(out, self.normalized)

    def __add__(self, other: "SparseAdjacency") -> "SparseAdjacency":
        if self.normalized or other.normalized:
            raise ValueError("only raw adjacencies can be summed")
        out = (self.matrix + other.matrix).tocsr()
        out.sort_indices()
        return SparseAdjacency(out, False)


def build_adjacency(edges: EdgeSet, n: int) -> SparseAdjacency:
    """Raw CSR adjacency; parallel edges of any kind are summed."""
    if len(edges) and (edges.src.max() >= n or edges.dst.max() >= n or min(edges.src.min(), edges.dst.min()) < 0):
        raise ValueError(f"edge endpoint outside [0, {n})")
    m = sp.coo_matrix((edges.weight, (edges.src, edges.dst)), shape=(n, n)).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return SparseAdjacency(m, normalized=False)


def normalize_adjacency(adj: SparseAdjacency) -> SparseAdjacency:
    """D^-1/2 (S + I) D^-1/2 with S = (A + A^T) / 2 and D the row sums of S + I.

    S equals A for symmetric input. Directed alias edges are split evenly
    over both directions so the propagation operator stays symmetric.
    """
    if adj.normalized:
        raise ValueError("adjacency is already normalized")
    if adj.nnz and adj.data.min() < 0:
        raise ValueError("negative edge weight")
    sym = (adj.matrix + adj.matrix.T) * 0.5
    a_hat = (sym + sp.identity(adj.n, format="csr")).tocsr()
    deg = np.asarray(a_hat.sum(axis=1)).ravel()
    d = sp.diags(1.0 / np.sqrt(deg))
    out = (d @ a_hat @ d).tocsr()
    out.sort_indices()
    return SparseAdjacency(out, normalized=True)


def union_adjacency(series: SnapshotSeries, n: int) -> SparseAdjacency:
    """Sum of the raw adjacencies of every snapshot."""
    return build_adjacency(_concat_sorted(list(series.snapshots)), n)
