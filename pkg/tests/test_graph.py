import logging
import math
from datetime import datetime, timedelta, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from covertnet.graph import (EDGE_KINDS, ConfigError, EdgeSet, NodeTable, SnapshotSeries, WindowSpec,
                             build_adjacency, build_nodes, build_series, bucket_snapshots, derive_edges,
                             normalize_adjacency, resolve_rules, union_adjacency)
from covertnet.ingest import EntityRecord

T0 = datetime(2019, 1, 1, tzinfo=timezone.utc)


def rec(name="Lotus", addr="1 main street", ts=T0, county="Travis", phone=None, alias=None, kind="listing",
        label="unlabeled", reviews=0, rate=None, raids=None):
    return EntityRecord(f"{name}-{ts.isoformat()}", name, addr, addr, "Austin", county, phone or "", phone, None,
                        reviews, rate, raids, alias, label, ts, kind)


# -- windows -----------------------------------------------------------------


def test_bucket_half_open():
    spec = WindowSpec(T0)
    windows, T = bucket_snapshots([rec(ts=T0), rec(ts=T0 + timedelta(days=7))], spec)
    assert windows.tolist() == [0, 1] and T == 2
    _, T = bucket_snapshots([rec(ts=T0 + timedelta(days=6, hours=23))], spec)
    assert T == 1


def test_bucket_before_start_is_fatal():
    with pytest.raises(ConfigError):
        bucket_snapshots([rec(ts=T0 - timedelta(seconds=1))], WindowSpec(T0))
    with pytest.raises(ConfigError):
        WindowSpec(T0, timedelta(0))


def test_gapped_fixture_spans_36_weeks(rng):
    weeks = sorted(set(rng.choice(36, size=12, replace=False).tolist()) | {0, 35})
    recs = [rec(ts=T0 + timedelta(weeks=w, hours=int(rng.integers(160)))) for w in weeks]
    windows, T = bucket_snapshots(recs, WindowSpec(T0))
    assert T == 36
    assert windows.tolist() == weeks


@given(st.lists(st.integers(0, 10 * 7 * 86400 - 1), min_size=1, max_size=60), st.integers(1, 14))
def test_bucket_partition(offsets, days):
    spec = WindowSpec(T0, timedelta(days=days))
    recs = [rec(ts=T0 + timedelta(seconds=s)) for s in offsets]
    windows, T = bucket_snapshots(recs, spec)
    width = days * 86400
    for s, k in zip(offsets, windows):
        assert k * width <= s < (k + 1) * width
    assert T == max(windows) + 1


# -- nodes -------------------------------------------------------------------


def test_nodes_by_parlor_key():
    nodes = build_nodes([rec("A"), rec("B"), rec("A", ts=T0 + timedelta(days=1))])
    assert len(nodes) == 2 and nodes.keys == [("A", "1 main street"), ("B", "1 main street")]


def test_label_rule(caplog):
    y = build_nodes([rec("A"), rec("A", kind="raid_report", label="raided"),
                     rec("B", kind="raid_report", label="not_raided"), rec("C")]).label
    assert y == ["raided", "not_raided", "unlabeled"]
    with caplog.at_level(logging.WARNING):
        conflict = build_nodes([rec("A", kind="raid_report", label="not_raided"),
                                rec("A", kind="raid_report", label="raided", ts=T0 + timedelta(days=1))])
    assert conflict.label == ["raided"] and "conflicting" in caplog.text


def test_static_aggregation_is_order_free():
    recs = [rec(reviews=3, rate=50.0, raids=1), rec(reviews=9, ts=T0 + timedelta(days=3), rate=80.0),
            rec(reviews=1, ts=T0 + timedelta(days=9), raids=2)]
    for order in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        nodes = build_nodes([recs[i] for i in order])
        assert nodes.review_count.tolist() == [9]
        assert nodes.hourly_rate_usd.tolist() == [80.0]
        assert nodes.num_local_raids.tolist() == [3.0]
    bare = build_nodes([rec()])
    assert math.isnan(bare.hourly_rate_usd[0]) and math.isnan(bare.num_local_raids[0])


def test_planted_parlor_count(rng):
    parlors = [(f"P{i}", f"{i} elm street") for i in range(120)]
    picks = np.concatenate([np.arange(120), rng.integers(0, 120, size=380)])
    recs = [rec(*parlors[int(i)], ts=T0 + timedelta(hours=int(h))) for i, h in zip(picks, rng.integers(0, 2000, 500))]
    nodes = build_nodes(recs)
    assert len(nodes) == 120
    assert sorted(nodes.index.values()) == list(range(120))


def test_node_table_round_trip(tmp_path):
    nodes = build_nodes([rec("A", rate=42.5, raids=2), rec("B, Inc", addr="9 oak avenue", county="Harris",
                                                            kind="raid_report", label="raided")])
    nodes.save(tmp_path / "nodes.csv")
    back = NodeTable.load(tmp_path / "nodes.csv")
    assert back.keys == nodes.keys and back.label == nodes.label and back.county == nodes.county
    np.testing.assert_array_equal(back.hourly_rate_usd, nodes.hourly_rate_usd)
    np.testing.assert_array_equal(back.num_local_raids, nodes.num_local_raids)


# -- edges -------------------------------------------------------------------


def test_same_county_pair():
    recs = [rec("A"), rec("B", addr="2 main street")]
    edges = derive_edges(build_nodes(recs), recs, "county")
    assert edges.typed() == {(0, 1, "same_county", 1.0), (1, 0, "same_county", 1.0)}


def test_single_node_has_no_edges():
    recs = [rec("A", phone="5125550100", alias="mimi"), rec("A", phone="5125550100", alias="mimi")]
    assert len(derive_edges(build_nodes(recs), recs, "all")) == 0


def test_burner_phone_edge_in_week_three():
    spec = WindowSpec(T0)
    recs = [rec("A", phone="5125550188", ts=T0 + timedelta(weeks=3, hours=1)),
            rec("B", addr="2 oak avenue", phone="5125550188", ts=T0 + timedelta(weeks=3, hours=5)),
            rec("C", addr="3 oak avenue", phone="5125550199", ts=T0 + timedelta(weeks=3, hours=6)),
            rec("A", phone="5125550111", ts=T0 + timedelta(weeks=1))]
    nodes = build_nodes(recs)
    series = build_series(recs, nodes, spec, "relational")
    assert series.T == 4
    phone_edges = series.snapshots[3].of_kind("shared_phone").typed()
    assert phone_edges == {(0, 1, "shared_phone", 1.0), (1, 0, "shared_phone", 1.0)}
    window3 = [r for r in recs if spec.index_of(r.timestamp) == 3]
    brute = oracles.brute_edges(window3, [], nodes.index, nodes.county, ("shared_phone",))
    assert phone_edges == brute
    assert all(len(series.snapshots[k]) == 0 for k in (0, 1, 2))


def test_weight_counts_distinct_witnesses():
    recs = [rec("A", phone="5125550101", alias="mimi"), rec("A", phone="5125550102"),
            rec("B", addr="2 oak avenue", phone="5125550101", alias="mimi"), rec("B", addr="2 oak avenue",
                                                                              phone="5125550102")]
    edges = derive_edges(build_nodes(recs), recs, "all")
    assert (0, 1, "shared_phone", 2.0) in edges.typed()
    assert (0, 1, "alias_mobility", 1.0) in edges.typed()


def test_lagged_alias_edge_is_directed():
    prev = [rec("A", alias="lily")]
    cur = [rec("B", addr="2 oak avenue", alias="lily", ts=T0 + timedelta(weeks=1))]
    nodes = build_nodes(prev + cur)
    assert derive_edges(nodes, cur, ("alias_mobility",), previous=prev).typed() == {(0, 1, "alias_mobility", 1.0)}


def test_shared_address_needs_distinct_names():
    recs = [rec("A", addr="5 pine road"), rec("A", addr="5 pine road"), rec("B", addr="5 pine road")]
    assert derive_edges(build_nodes(recs), recs, ("shared_address",)).typed() == {
        (0, 1, "shared_address", 1.0), (1, 0, "shared_address", 1.0)}


def test_rules():
    assert resolve_rules("county") == ("same_county",)
    assert resolve_rules("all") == EDGE_KINDS
    assert resolve_rules("shared_phone, alias_mobility") == ("shared_phone", "alias_mobility")
    with pytest.raises(ConfigError):
        resolve_rules("telepathy")


def _fixture_edges(seed):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(2, 6))
    recs = oracles.random_records(rng, int(rng.integers(1, 201)), int(rng.integers(1, 51)), T)
    spec = WindowSpec(oracles.START)
    nodes = build_nodes(recs)
    windows, _ = bucket_snapshots(recs, spec)
    series = build_series(recs, nodes, spec, "all", windows=windows, T=T)
    for k in range(T):
        here = [r for r, w in zip(recs, windows) if w == k]
        prev = [r for r, w in zip(recs, windows) if w == k - 1]
        yield series.snapshots[k], oracles.brute_edges(here, prev, nodes.index, nodes.county, EDGE_KINDS), nodes


@pytest.mark.parametrize("seed", range(10))
def test_edges_match_pairwise_scan(seed):
    for snap, brute, nodes in _fixture_edges(seed):
        assert snap.typed() == brute
        assert len(snap.typed()) == len(snap)  # no duplicate typed entries
        n = len(nodes)
        assert np.all(snap.src != snap.dst)
        assert np.all((snap.src >= 0) & (snap.src < n) & (snap.dst >= 0) & (snap.dst < n))
        typed = snap.typed()
        for s, d, kind, w in typed:
            if kind != "alias_mobility":
                assert (d, s, kind, w) in typed


def test_same_county_counts(rng):
    recs = oracles.random_records(rng, 150, 40, 1)
    nodes = build_nodes(recs)
    edges = derive_edges(nodes, recs, "county")
    for county in set(nodes.county):
        members = [i for i, c in enumerate(nodes.county) if c == county]
        n_c = len(members)
        got = int(np.isin(edges.src, members).sum())
        assert got == n_c * (n_c - 1)


def test_series_round_trip(tmp_path, rng):
    recs = oracles.random_records(rng, 120, 20, 4)
    nodes = build_nodes(recs)
    series = build_series(recs, nodes, WindowSpec(oracles.START), "all")
    series.save(tmp_path, nodes)
    back = SnapshotSeries.load(tmp_path)
    assert back.T == series.T and back.rules == series.rules and back.window_spec == series.window_spec
    for a, b in zip(back.snapshots, series.snapshots):
        assert a.typed() == b.typed()
    assert (tmp_path / "manifest.json").exists() and (tmp_path / "nodes.csv").exists()


# -- adjacency ---------------------------------------------------------------


def test_empty_adjacency():
    adj = build_adjacency(EdgeSet.empty(), 4)
    assert adj.indptr.tolist() == [0, 0, 0, 0, 0] and adj.nnz == 0


def test_two_entry_adjacency():
    adj = build_adjacency(EdgeSet.from_tuples([(0, 1, "shared_phone", 1.0), (1, 0, "shared_phone", 1.0)]), 2)
    assert adj.nnz == 2
    dense = adj.toarray()
    assert np.array_equal(dense, dense.T)


def test_endpoint_out_of_range():
    with pytest.raises(ValueError):
        build_adjacency(EdgeSet.from_tuples([(0, 3, "shared_phone", 1.0)]), 3)


def random_edges(rng, n, m):
    kinds = list(EDGE_KINDS)
    out = set()
    for _ in range(m):
        s, d = rng.integers(0, n, size=2)
        if s != d:
            out.add((int(s), int(d), kinds[int(rng.integers(4))], float(rng.integers(1, 4))))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_adjacency_matches_dense_accumulation(seed):
    rng = np.random.default_rng(seed)
    edges = random_edges(rng, 50, 300)
    adj = build_adjacency(EdgeSet.from_tuples(edges), 50)
    np.testing.assert_array_equal(adj.toarray(), oracles.dense_adjacency(edges, 50))
    assert np.all(np.diff(adj.indptr) >= 0)
    for u in range(50):
        cols = adj.indices[adj.indptr[u]:adj.indptr[u + 1]]
        assert np.all(np.diff(cols) > 0)


def test_normalize_examples():
    one = normalize_adjacency(build_adjacency(EdgeSet.empty(), 1))
    assert one.toarray().tolist() == [[1.0]]
    pair = normalize_adjacency(build_adjacency(EdgeSet.from_tuples([(0, 1, "same_county", 1.0),
                                                                    (1, 0, "same_county", 1.0)]), 2))
    np.testing.assert_allclose(pair.toarray(), [[0.5, 0.5], [0.5, 0.5]], atol=1e-15)
    path = [(0, 1, "same_county", 1.0), (1, 0, "same_county", 1.0), (1, 2, "same_county", 1.0),
            (2, 1, "same_county", 1.0)]
    got = normalize_adjacency(build_adjacency(EdgeSet.from_tuples(path), 3)).toarray()
    s6 = 1 / math.sqrt(6)
    np.testing.assert_allclose(got, [[0.5, s6, 0], [s6, 1 / 3, s6], [0, s6, 0.5]], atol=1e-15)
    np.testing.assert_allclose(got, oracles.dense_normalize(oracles.dense_adjacency(path, 3)), atol=1e-15)


def test_normalize_splits_directed_edges(rng):
    lagged = build_adjacency(EdgeSet.from_tuples([(0, 1, "alias_mobility", 1.0)]), 2)
    assert lagged.toarray().tolist() == [[0.0, 1.0], [0.0, 0.0]]
    np.testing.assert_allclose(normalize_adjacency(lagged).toarray(), [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)
    edges = random_edges(rng, 12, 30)
    raw = build_adjacency(EdgeSet.from_tuples(edges), 12)
    dense = normalize_adjacency(raw).toarray()
    np.testing.assert_allclose(dense, dense.T, atol=1e-15)
    np.testing.assert_allclose(dense, oracles.dense_normalize(oracles.dense_adjacency(edges, 12)), atol=1e-12)


def test_normalize_rejects_double_and_negative():
    adj = normalize_adjacency(build_adjacency(EdgeSet.empty(), 2))
    with pytest.raises(ValueError):
        normalize_adjacency(adj)
    neg = build_adjacency(EdgeSet(np.array([0]), np.array([1]), np.array([1], dtype=np.int8), np.array([-1.0])), 2)
    with pytest.raises(ValueError):
        normalize_adjacency(neg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1))
def test_normalized_entries_in_unit_interval(n, seed):
    rng = np.random.default_rng(seed)
    edges = random_edges(rng, n, 3 * n)
    sym = edges | {(d, s, k, w) for s, d, k, w in edges}
    norm = normalize_adjacency(build_adjacency(EdgeSet.from_tuples(sym), n))
    dense = norm.toarray()
    assert dense.min() >= 0 and dense.max() <= 1 + 1e-15
    np.testing.assert_allclose(dense, oracles.dense_normalize(oracles.dense_adjacency(sym, n)), atol=1e-12)


def test_union_sums_snapshots():
    a = EdgeSet.from_tuples([(0, 1, "shared_phone", 1.0), (1, 0, "shared_phone", 1.0)])
    b = EdgeSet.from_tuples([(0, 1, "shared_phone", 2.0), (1, 2, "alias_mobility", 1.0)])
    series = SnapshotSeries(WindowSpec(T0), [a, b])
    dense = union_adjacency(series, 3).toarray()
    assert dense[0, 1] == 3.0 and dense[1, 0] == 1.0 and dense[1, 2] == 1.0
    assert (build_adjacency(a, 3) + build_adjacency(b, 3)).toarray().tolist() == dense.tolist()
