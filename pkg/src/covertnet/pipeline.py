"""Records to model-ready inputs in one call, plus the seed-derivation rule."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureTensor, assemble_features
from .graph import (DEFAULT_RULES, NodeTable, SnapshotSeries, SparseAdjacency, WindowSpec, bucket_snapshots,
                    build_nodes, build_series, union_adjacency)
from .ingest import EntityRecord
from .models import GraphInputs
from .train_eval import SplitMask, split


def derive_seed(seed: int, module: str) -> int:
    """Sub-seed for one module: first 8 bytes of sha256("<seed>:<module>"), as an unsigned int."""
    digest = hashlib.sha256(f"{int(seed)}:{module}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class PreparedData:
    nodes: NodeTable
    windows: np.ndarray
    series: SnapshotSeries
    features: FeatureTensor
    adjacency: SparseAdjacency
    y: np.ndarray
    split: SplitMask

    @property
    def inputs(self) -> GraphInputs:
        return GraphInputs(self.features.values, self.adjacency)


def prepare(
    records: Sequence[EntityRecord],
    window_spec: WindowSpec | None = None,
    rules: str = DEFAULT_RULES,
    fractions: Sequence[float] = (0.7, 0.15, 0.15),
    split_seed: int = 0,
    T: int | None = None,
) -> PreparedData:
    """Nodes, snapshot series, standardized features, union adjacency and a stratified split."""
    spec = window_spec or WindowSpec.covering(records)
    windows, T_seen = bucket_snapshots(records, spec)
    T = T_seen if T is None else T
    nodes = build_nodes(records)
    series = build_series(records, nodes, spec, rules, windows=windows, T=T)
    y = nodes.y
    mask = split(y, fractions, split_seed)
    features = assemble_features(nodes, records, windows, T, train_nodes=mask.train)
    return PreparedData(nodes, windows, series, features, union_adjacency(series, len(nodes)), y, mask)
