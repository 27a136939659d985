"""Cached synthetic datasets and oracle comparisons shared across test files."""

from __future__ import annotations

import functools

import numpy as np

import oracles
from covertnet.features import assemble_features
from covertnet.graph import WindowSpec, build_nodes, bucket_snapshots
from covertnet.pipeline import PreparedData, prepare
from covertnet.synthgen import PRESETS, ScenarioConfig, SyntheticDataset, generate


@functools.lru_cache(maxsize=8)
def synthetic(config: ScenarioConfig, split_seed: int = 0) -> tuple[PreparedData, SyntheticDataset]:
    """Generated dataset prepared over exactly the scenario's T windows (cached per config)."""
    data = generate(config)
    prepared = prepare(data.records, WindowSpec(config.start_time), split_seed=split_seed, T=config.T)
    return prepared, data


def preset(name: str, seed: int, split_seed: int | None = None, **overrides):
    config = PRESETS[name](seed=seed)
    if overrides:
        config = ScenarioConfig(**{**config.__dict__, **overrides})
    return synthetic(config, seed if split_seed is None else split_seed)


def tensor_for(recs, T=None, train_nodes=None):
    nodes = build_nodes(recs)
    windows, T_seen = bucket_snapshots(recs, WindowSpec(oracles.START))
    return nodes, assemble_features(nodes, recs, windows, T or T_seen, train_nodes=train_nodes)


def compare_features_with_oracle(recs):
    T = max(oracles.window_of(r.timestamp) for r in recs) + 1
    nodes, tensor = tensor_for(recs, T)
    index = nodes.index
    assert index == oracles.node_index(recs)
    present = oracles.presence(recs, index, T)
    counts, bursts, gaps = oracles.brute_ads(recs, index, T)
    sightings = [(r.alias, index[r.parlor_key], oracles.window_of(r.timestamp)) for r in recs]
    out_deg = np.zeros((T, len(index)))
    in_deg = np.zeros((T, len(index)))
    for _, u, v, k in oracles.brute_transitions(sightings):
        out_deg[k, u] += 1
        in_deg[k, v] += 1
    integer = {"address_reuse": oracles.brute_address_reuse(recs, index, T), "ad_count": counts,
               "alias_out": out_deg, "alias_in": in_deg}
    decimal = {"phone_entropy": oracles.brute_phone_entropy(recs, index, T), "ad_burst": bursts,
               "ad_interarrival_days": gaps}
    for name, expected in integer.items():
        assert np.array_equal(tensor.column(name), np.where(present, expected, 0.0)), name
    for name, expected in decimal.items():
        np.testing.assert_allclose(tensor.column(name), np.where(present, expected, 0.0), rtol=0, atol=1e-12,
                                   err_msg=name)
