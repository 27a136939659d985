"""Behavioral features per node and window, and the assembled T x N x F tensor.

Temporal features are causal: values for window k only use observations
from windows <= k. A node with no records in a window gets zeros for every
temporal column in that window; static columns are repeated over time.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import NodeTable
from .ingest import CategoryVocab, EntityRecord, build_vocab

STATIC_COLUMNS = (
    "review_count",
    "hourly_rate_usd",
    "num_local_raids",
    "hourly_rate_usd_present",
    "num_local_raids_present",
)
TEMPORAL_COLUMNS = (
    "phone_entropy",
    "address_reuse",
    "ad_count",
    "ad_burst",
    "ad_interarrival_days",
    "alias_out",
    "alias_in",
)
STANDARDIZED_COLUMNS = frozenset({
    "review_count",
    "hourly_rate_usd",
    "num_local_raids",
    "phone_entropy",
    "address_reuse",
    "ad_count",
    "ad_burst",
    "ad_interarrival_days",
    "alias_out",
    "alias_in",
})
BURST_WINDOW = 4


class FeatureError(ValueError):
    pass


# -- feature families --------------------------------------------------------


def phone_entropy(sightings: Iterable[tuple[int, int]]) -> float:
    """Shannon entropy (bits) of a phone's sightings over the nodes it was seen at.

    `sightings` are (node_id, window) pairs; repeats of a pair count once.
    """
    counts = Counter(node for node, _ in set(sightings))
    if not counts:
        raise ValueError("phone has no sightings")
    return _entropy(counts.values())


def _entropy(counts: Iterable[int]) -> float:
    counts = list(counts)
    total = sum(counts)
    h = 0.0
    for c in counts:
        if c:
            p = c / total
            h -= p * math.log2(p)
    return h + 0.0


def address_reuse(pairs: Iterable[tuple[str, int]]) -> int:
    """Distinct (parlor_name, window) pairs seen at one address, minus one."""
    distinct = set(pairs)
    return max(len(distinct) - 1, 0)


def ad_density(ad_windows: Sequence[int], T: int, trailing: int = BURST_WINDOW) -> tuple[np.ndarray, np.ndarray]:
    """Per-window ad counts and burst scores for one node."""
    counts = np.bincount(np.asarray(ad_windows, dtype=np.int64), minlength=T)[:T].astype(float)
    return counts, burst_scores(counts[:, None], trailing)[:, 0]


def burst_scores(counts: np.ndarray, trailing: int = BURST_WINDOW) -> np.ndarray:
    """(c_k - mean(prev)) / max(std(prev), 1) over the trailing windows; column-wise."""
    out = np.zeros_like(counts, dtype=float)
    for k in range(1, counts.shape[0]):
        prev = counts[max(0, k - trailing):k]
        out[k] = (counts[k] - prev.mean(axis=0)) / np.maximum(prev.std(axis=0), 1.0)
    return out


@dataclass
class AliasTransitionGraph:
    """Alias moves (alias, from_node, to_node, window), sorted and unique."""

    transitions: list[tuple[str, int, int, int]]

    def degrees(self, n_nodes: int, T: int) -> tuple[np.ndarray, np.ndarray]:
        out_deg = np.zeros((T, n_nodes))
        in_deg = np.zeros((T, n_nodes))
        for _, u, v, k in self.transitions:
            out_deg[k, u] += 1
            in_deg[k, v] += 1
        return out_deg, in_deg

    def for_alias(self, alias: str) -> list[tuple[int, int, int]]:
        return [(u, v, k) for a, u, v, k in self.transitions if a == alias]


def alias_transitions(sightings: Iterable[tuple[str, int, int]], max_lag: int = 1) -> AliasTransitionGraph:
    """Transitions u->v at window k+lag for an alias seen at u in k and at v in k+lag, lag in 0..max_lag."""
    seen: dict[str, dict[int, set[int]]] = defaultdict(lambda: defaultdict(set))
    for alias, node, window in sightings:
        if alias:
            seen[alias][window].add(node)
    moves = set()
    for alias, by_window in seen.items():
        for k, here in by_window.items():
            for lag in range(max_lag + 1):
                there = by_window.get(k + lag)
                if not there:
                    continue
                for u in here:
                    for v in there:
                        if u != v:
                            moves.add((alias, u, v, k + lag))
    return AliasTransitionGraph(sorted(moves))


# -- tensor ------------------------------------------------------------------


@dataclass
class FeatureTensor:
    values: np.ndarray  # T x N x F
    feature_names: list[str]
    stats: dict[str, dict[str, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[2] != len(self.feature_names):
            raise FeatureError("feature width does not match feature_names")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise FeatureError("duplicate feature names")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def column(self, name: str) -> np.ndarray:
        return self.values[:, :, self.feature_names.index(name)]

    def time_mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        T, N, F = self.values.shape
        manifest = {"T": T, "N": N, "F": F, "feature_names": self.feature_names, "stats": self.stats,
                    "dtype": "<f8", "order": "T,N,F"}
        (directory / "features.json").write_text(json.dumps(manifest, indent=2) + "\n")
        np.ascontiguousarray(self.values, dtype="<f8").tofile(directory / "features.bin")

    @classmethod
    def load(cls, directory: str | Path) -> "FeatureTensor":
        directory = Path(directory)
        manifest = json.loads((directory / "features.json").read_text())
        shape = (manifest["T"], manifest["N"], manifest["F"])
        values = np.fromfile(directory / "features.bin", dtype="<f8")
        if values.size != math.prod(shape):
            raise FeatureError("binary size does not match manifest shape")
        return cls(values.reshape(shape).astype(float), list(manifest["feature_names"]), manifest.get("stats", {}))


@dataclass
class _Columns:
    node: np.ndarray
    window: np.ndarray
    is_ad: np.ndarray
    seconds: np.ndarray
    phone: list
    address: list
    name: list
    alias: list


def _columns(nodes: NodeTable, records: Sequence[EntityRecord], windows: np.ndarray) -> _Columns:
    return _Columns(
        node=nodes.node_ids(records),
        window=np.asarray(windows, dtype=np.int64),
        is_ad=np.array([r.source_kind == "advertisement" for r in records], dtype=bool),
        seconds=np.array([r.timestamp.timestamp() for r in records], dtype=float),
        phone=[r.phone_canon for r in records],
        address=[r.address_canon for r in records],
        name=[r.parlor_name for r in records],
        alias=[r.alias for r in records],
    )


def phone_entropy_matrix(cols: _Columns, n_nodes: int, T: int) -> np.ndarray:
    """Max entropy over a node's phones in each window (cumulative sightings)."""
    by_phone: dict[str, dict[int, set[int]]] = defaultdict(lambda: defaultdict(set))
    for p, u, k in zip(cols.phone, cols.node.tolist(), cols.window.tolist()):
        if p:
            by_phone[p][k].add(u)
    out = np.zeros((T, n_nodes))
    for by_window in by_phone.values():
        counts: Counter = Counter()
        for k in sorted(by_window):
            here = by_window[k]
            counts.update(here)
            h = _entropy(counts.values()) if len(counts) > 1 else 0.0
            for u in here:
                if h > out[k, u]:
                    out[k, u] = h
    return out


def address_reuse_matrix(cols: _Columns, n_nodes: int, T: int) -> np.ndarray:
    """Reuse of each node's address counting (name, window) pairs up to window k."""
    by_addr: dict[str, dict[int, set[str]]] = defaultdict(lambda: defaultdict(set))
    present: dict[str, dict[int, set[int]]] = defaultdict(lambda: defaultdict(set))
    for a, name, u, k in zip(cols.address, cols.name, cols.node.tolist(), cols.window.tolist()):
        by_addr[a][k].add(name)
        present[a][k].add(u)
    out = np.zeros((T, n_nodes))
    for a, by_window in by_addr.items():
        total = 0
        for k in sorted(by_window):
            total += len(by_window[k])
            for u in present[a][k]:
                out[k, u] = total - 1
    return out


def ad_matrices(cols: _Columns, n_nodes: int, T: int, trailing: int = BURST_WINDOW):
    """Ad counts, burst scores and mean interarrival (days) per window and node."""
    node = cols.node[cols.is_ad]
    window = cols.window[cols.is_ad]
    secs = cols.seconds[cols.is_ad]
    counts = np.zeros((T, n_nodes))
    np.add.at(counts, (window, node), 1.0)
    bursts = burst_scores(counts, trailing)

    gaps = np.zeros((T, n_nodes))
    if len(node) > 1:
        order = np.lexsort((secs, node, window))
        node, window, secs = node[order], window[order], secs[order]
        same = (node[1:] == node[:-1]) & (window[1:] == window[:-1])
        diffs = (secs[1:] - secs[:-1])[same] / 86400.0
        np.add.at(gaps, (window[1:][same], node[1:][same]), diffs)
        n_gaps = np.maximum(counts - 1, 1)
        gaps = np.where(counts > 1, gaps / n_gaps, 0.0)
    return counts, bursts, gaps


def presence_matrix(cols: _Columns, n_nodes: int, T: int) -> np.ndarray:
    present = np.zeros((T, n_nodes), dtype=bool)
    present[cols.window, cols.node] = True
    return present


def assemble_features(
    nodes: NodeTable,
    records: Sequence[EntityRecord],
    windows: np.ndarray,
    T: int,
    vocabs: Mapping[str, CategoryVocab] | None = None,
    train_nodes: np.ndarray | None = None,
) -> FeatureTensor:
    """Build the fixed-layout feature tensor; standardize when `train_nodes` is given.

    Column layout: static numerics, presence flags, temporal behavior
    columns, then one-hot county and owner ethnicity blocks.
    """
    N = len(nodes)
    if vocabs is None:
        vocabs = {f: build_vocab(records, f) for f in ("county", "owner_ethnicity")}
    cols = _columns(nodes, records, windows)
    if len(cols.window) and cols.window.max() >= T:
        raise FeatureError("record window outside [0, T)")

    rate_present = ~np.isnan(nodes.hourly_rate_usd)
    raids_present = ~np.isnan(nodes.num_local_raids)
    static = np.column_stack([
        nodes.review_count.astype(float),
        np.nan_to_num(nodes.hourly_rate_usd, nan=0.0),
        np.nan_to_num(nodes.num_local_raids, nan=0.0),
        rate_present.astype(float),
        raids_present.astype(float),
    ]) if N else np.zeros((0, len(STATIC_COLUMNS)))

    county = vocabs["county"]
    eth = vocabs["owner_ethnicity"]
    onehot = np.array([county.encode(c) + eth.encode(e) for c, e in zip(nodes.county, nodes.owner_ethnicity)],
                      dtype=float).reshape(N, len(county) + len(eth))
    names = (list(STATIC_COLUMNS) + list(TEMPORAL_COLUMNS)
             + [f"county={c}" for c in county.categories]
             + [f"owner_ethnicity={e}" for e in eth.categories])

    # filled in place: at stress scale the tensor is most of the memory budget
    n_static, n_temporal = len(STATIC_COLUMNS), len(TEMPORAL_COLUMNS)
    values = np.empty((T, N, len(names)))
    values[:, :, :n_static] = static[None]
    values[:, :, n_static + n_temporal:] = onehot[None]
    present = presence_matrix(cols, N, T)
    counts, bursts, gaps = ad_matrices(cols, N, T)
    transitions = alias_transitions(zip(cols.alias, cols.node.tolist(), cols.window.tolist()))
    alias_out, alias_in = transitions.degrees(N, T)
    temporal = (phone_entropy_matrix(cols, N, T), address_reuse_matrix(cols, N, T), counts, bursts, gaps,
                alias_out, alias_in)
    for j, block in enumerate(temporal):
        values[:, :, n_static + j] = np.where(present, block, 0.0)
    del temporal, counts, bursts, gaps, alias_out, alias_in

    tensor = FeatureTensor(values, names)
    if train_nodes is not None:
        tensor = apply_stats(tensor, standardize_stats(tensor, train_nodes), copy=False)
    return tensor


def standardize_stats(tensor: FeatureTensor, train_nodes: np.ndarray) -> dict[str, dict[str, float]]:
    """Mean and population std per standardized column over training nodes and all windows."""
    train_nodes = np.asarray(train_nodes, dtype=np.int64)
    if not len(train_nodes):
        raise FeatureError("standardization needs at least one training node")
    stats = {}
    for j, name in enumerate(tensor.feature_names):
        if name in STANDARDIZED_COLUMNS:
            block = tensor.values[:, train_nodes, j]
            stats[name] = {"mean": float(block.mean()), "std": float(block.std())}
    return stats


def apply_stats(tensor: FeatureTensor, stats: Mapping[str, Mapping[str, float]], copy: bool = True) -> FeatureTensor:
    missing = [n for n in tensor.feature_names if n in STANDARDIZED_COLUMNS and n not in stats]
    if missing:
        raise FeatureError(f"no standardization stats for {missing}")
    values = tensor.values.copy() if copy else tensor.values
    for j, name in enumerate(tensor.feature_names):
        if name in stats:
            mu, sd = stats[name]["mean"], stats[name]["std"]
            if sd <= 1e-12:
                values[:, :, j] = 0.0
            else:
                values[:, :, j] = (values[:, :, j] - mu) / sd
    return FeatureTensor(values, list(tensor.feature_names), {k: dict(v) for k, v in stats.items()})


def standardize(tensor: FeatureTensor, train_nodes: np.ndarray) -> FeatureTensor:
    return apply_stats(tensor, standardize_stats(tensor, train_nodes))
