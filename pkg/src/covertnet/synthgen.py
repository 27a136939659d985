"""Synthetic record streams with planted covert-network motifs.

Nodes are grouped into pairs (a triple when a class has odd size) within
their class. All phone sharing happens inside a group, so every node has a
single sharing partner regardless of class. Motifs:

* burner: an illicit group shares one fresh phone for a contiguous run of
  windows, then drops it.
* decoy (legit groups, optional): the same episode process is simulated but
  the shared windows are scattered at random, so the number of shared
  windows per node has the same distribution in both classes and only the
  temporal arrangement differs.
* migration: an alias leaves an illicit node and is seen at another illicit
  node in the next window.
* ad_burst: extra advertisements in one window.
* facade: two illicit nodes share a storefront address under different
  parlor names; the first stops trading at the window the second opens.

Static attributes (county, owner ethnicity, reviews, rates, raids) are drawn
independently of class.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field, fields
from datetime import datetime, timedelta
from pathlib import Path
from typing import Mapping

import numpy as np

from .ingest import EntityRecord, normalize_address, normalize_phone, parse_timestamp, write_records

WEEK_SECONDS = 7 * 24 * 3600
MOTIF_KINDS = ("burner", "decoy", "noise", "migration", "ad_burst", "facade")

_NAME_WORDS = ("Lotus", "Jade", "Orchid", "Golden", "Harmony", "Serene", "Bamboo", "Pearl",
               "Sunrise", "Willow", "Zen", "Lucky", "Blossom", "Oasis", "Silk", "Tranquil")
_NAME_KINDS = ("Spa", "Massage", "Wellness", "Day Spa", "Body Care", "Relax Center")
_STREETS = ("Main", "Oak", "Pine", "Maple", "Cedar", "Elm", "Lake", "Hill", "Park", "Washington",
            "Lincoln", "Jefferson", "Madison", "Franklin", "Highland", "Sunset", "River", "Church")
_SUFFIXES = (("St", "St.", "Street"), ("Ave", "Ave.", "Avenue"), ("Blvd", "Blvd.", "Boulevard"),
             ("Dr", "Dr.", "Drive"), ("Rd", "Rd.", "Road"))
_ALIASES = ("Mimi", "Lily", "Coco", "Jenny", "Amy", "Kiki", "Lulu", "Nana", "Tina", "Vicky",
            "Candy", "Sunny", "Daisy", "Rose", "Ruby", "Ivy")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioConfig:
    n_legit: int = 1800
    n_illicit: int = 200
    T: int = 12
    n_counties: int = 5
    n_ethnicities: int = 9
    start: str = "2019-01-07T00:00:00Z"
    activity_rate: float = 1.0
    n_labeled: int = -1  # -1: every node carries a raid report
    ad_rate: float = 2.0
    rate_missing: float = 0.1
    # motif rates
    burner_rate: float = 0.15
    burner_run: int = 3
    migration_rate: float = 0.1
    ad_burst_rate: float = 0.1
    ad_burst_magnitude: int = 6
    facade_rate: float = 0.2
    # noise
    decoy_sharing: bool = True
    phone_noise_rate: float = 0.02
    seed: int = 42

    def __post_init__(self):
        for name in ("activity_rate", "rate_missing", "burner_rate", "migration_rate",
                     "ad_burst_rate", "facade_rate", "phone_noise_rate"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ScenarioError(f"{name} must be a probability, got {p}")
        if self.T < 2:
            raise ScenarioError("T must be at least 2")
        if self.n_counties < 2:
            raise ScenarioError("need at least 2 counties")
        if self.n_ethnicities < 1:
            raise ScenarioError("need at least 1 owner ethnicity category")
        if min(self.n_legit, self.n_illicit) < 0 or self.n_nodes < 1:
            raise ScenarioError("node counts must be non-negative with at least one node")
        if self.burner_run < 1 or self.ad_burst_magnitude < 0 or self.ad_rate < 0:
            raise ScenarioError("burner_run must be >= 1; ad rate and burst magnitude non-negative")
        if self.n_labeled > self.n_nodes:
            raise ScenarioError(f"n_labeled={self.n_labeled} exceeds the {self.n_nodes} nodes")
        group_motifs = {"burner_rate": self.burner_rate, "migration_rate": self.migration_rate,
                        "facade_rate": self.facade_rate}
        for name, rate in group_motifs.items():
            if rate > 0 and self.n_illicit < 2:
                raise ScenarioError(f"{name} > 0 needs at least 2 illicit nodes to move between "
                                    f"or share with; got {self.n_illicit}")
        try:
            parse_timestamp(self.start)
        except ValueError as exc:
            raise ScenarioError(f"start: {exc}") from None

    @property
    def n_nodes(self) -> int:
        return self.n_legit + self.n_illicit

    @property
    def start_time(self) -> datetime:
        return parse_timestamp(self.start)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "ScenarioConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        kwargs = {}
        for key, raw in values.items():
            kind = type(getattr(cls(), key)) if key != "start" else str
            kwargs[key] = _coerce(raw, kind, key)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ScenarioConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keys are case-sensitive (T)
        parser.read_string("[scenario]\n" + text)
        return cls.from_mapping(dict(parser["scenario"]))


def _coerce(raw, kind, key):
    if not isinstance(raw, str):
        return kind(raw)
    try:
        if kind is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        return kind(raw.strip())
    except ValueError:
        raise ScenarioError(f"{key}: cannot read {raw!r} as {kind.__name__}") from None


def default_config(seed: int = 42) -> ScenarioConfig:
    return ScenarioConfig(seed=seed)


def null_config(seed: int = 42) -> ScenarioConfig:
    """Every motif off; background noise is identical for both classes."""
    return ScenarioConfig(burner_rate=0.0, migration_rate=0.0, ad_burst_rate=0.0, facade_rate=0.0, seed=seed)


def burner_only_config(seed: int = 42) -> ScenarioConfig:
    """Burner rotation with matched decoys: the signal is in the ordering of windows only."""
    return ScenarioConfig(burner_rate=0.2, burner_run=4, migration_rate=0.0, ad_burst_rate=0.0,
                          facade_rate=0.0, decoy_sharing=True, phone_noise_rate=0.0, seed=seed)


def stress_config(seed: int = 42) -> ScenarioConfig:
    """Scale target: 25,481 nodes over 156 weekly windows, 215 labeled."""
    return ScenarioConfig(n_legit=22933, n_illicit=2548, T=156, activity_rate=0.05,
                          n_labeled=215, ad_rate=1.0, seed=seed)


PRESETS = {
    "default": default_config,
    "null": null_config,
    "burner_only": burner_only_config,
    "stress": stress_config,
}


# -- outputs -----------------------------------------------------------------


@dataclass(frozen=True)
class MotifEvent:
    motif: str
    window: int
    nodes: tuple[int, ...]
    length: int = 1
    detail: str = ""


@dataclass(frozen=True)
class NodeTruth:
    gen_id: int
    parlor_name: str
    address_canon: str
    illicit: bool
    labeled: bool


@dataclass
class SyntheticDataset:
    config: ScenarioConfig
    records: list[EntityRecord]
    truth: list[NodeTruth]
    motifs: list[MotifEvent]
    active: np.ndarray = field(repr=False)  # T x N generator activity mask

    def motifs_of(self, kind: str) -> list[MotifEvent]:
        return [m for m in self.motifs if m.motif == kind]

    def key_of(self, gen_id: int) -> tuple[str, str]:
        t = self.truth[gen_id]
        return (t.parlor_name, t.address_canon)

    def write(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_records(self.records, directory / "records.csv")
        with open(directory / "labels.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["gen_id", "parlor_name", "address_canon", "class", "labeled"])
            for t in self.truth:
                w.writerow([t.gen_id, t.parlor_name, t.address_canon,
                            "illicit" if t.illicit else "legit", int(t.labeled)])
        with open(directory / "motifs.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["motif", "window", "nodes", "length", "detail"])
            for m in self.motifs:
                w.writerow([m.motif, m.window, " ".join(map(str, m.nodes)), m.length, m.detail])
        (directory / "scenario.cfg").write_text(self.config.to_text(), encoding="utf-8")


def read_motifs(path: str | Path) -> list[MotifEvent]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [MotifEvent(row["motif"], int(row["window"]), tuple(int(x) for x in row["nodes"].split()),
                           int(row["length"]), row["detail"]) for row in csv.DictReader(fh)]


# -- generation --------------------------------------------------------------


def _groups(members: np.ndarray, rng: np.random.Generator) -> list[tuple[int, ...]]:
    order = rng.permutation(members).tolist()
    if len(order) < 2:
        return []
    groups = [tuple(order[i:i + 2]) for i in range(0, len(order) - len(order) % 2, 2)]
    if len(order) % 2:
        groups[-1] = groups[-1] + (order[-1],)
    return groups


def _episodes(rate: float, run: int, T: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    """(start, length) of contiguous episodes; a new one may start once the last ends."""
    out = []
    k = 0
    while k < T:
        if rng.random() < rate:
            length = min(run, T - k)
            out.append((k, length))
            k += length
        else:
            k += 1
    return out


def _format_phone(digits: str, style: int) -> str:
    a, b, c = digits[:3], digits[3:6], digits[6:]
    return (f"({a}) {b}-{c}", f"{a}.{b}.{c}", f"+1 {a} {b} {c}", f"{a}-{b}-{c}", digits)[style]


class _PhoneBook:
    def __init__(self):
        self.next_shared = 0

    @staticmethod
    def primary(gen_id: int, county: int) -> str:
        return f"{200 + county % 700:03d}{2000000 + gen_id:07d}"

    def fresh(self) -> str:
        self.next_shared += 1
        return f"999{8000000 + self.next_shared:07d}"


def generate(config: ScenarioConfig) -> SyntheticDataset:
    """Deterministic record stream for ``config``; a pure function of it."""
    N, T = config.n_nodes, config.T
    root = np.random.SeedSequence(config.seed)
    master_seq, node_root = root.spawn(2)
    master = np.random.default_rng(master_seq)
    node_rngs = [np.random.default_rng(s) for s in node_root.spawn(N)]

    illicit = np.zeros(N, dtype=bool)
    illicit[master.permutation(N)[: config.n_illicit]] = True
    labeled = np.ones(N, dtype=bool)
    if config.n_labeled >= 0:
        labeled[:] = False
        labeled[master.permutation(N)[: config.n_labeled]] = True

    county = np.empty(N, dtype=np.int64)
    active = np.zeros((T, N), dtype=bool)
    for u, rng in enumerate(node_rngs):
        county[u] = rng.integers(config.n_counties)
        act = rng.random(T) < config.activity_rate
        if not act.any():
            act[rng.integers(T)] = True
        active[:, u] = act

    ill_groups = _groups(np.flatnonzero(illicit), master)
    legit_groups = _groups(np.flatnonzero(~illicit), master)
    motifs: list[MotifEvent] = []
    phones = _PhoneBook()
    shared: dict[tuple[int, int], list[str]] = {}  # (node, window) -> extra phones
    address_owner = np.arange(N)

    # facade: split a group's timeline at one overlapping window
    if config.facade_rate > 0:
        for g in ill_groups:
            if master.random() < config.facade_rate:
                a, b = g[0], g[1]
                m = int(master.integers(0, T - 1)) if T > 2 else 0
                active[m + 1:, a] = False
                active[:m, b] = False
                active[m, a] = active[m, b] = True
                address_owner[b] = a
                motifs.append(MotifEvent("facade", m, (a, b)))

    def share(group, windows, kind, length=None):
        windows = [k for k in windows if active[k, list(group)].all()]
        if not windows:
            return
        phone = phones.fresh()
        for k in windows:
            for u in group:
                shared.setdefault((u, k), []).append(phone)
        motifs.append(MotifEvent(kind, windows[0], tuple(group), len(windows), phone))

    for g in ill_groups:
        if config.burner_rate > 0:
            for start, length in _episodes(config.burner_rate, config.burner_run, T, master):
                share(g, range(start, start + length), "burner")
    for g in legit_groups:
        if config.decoy_sharing and config.burner_rate > 0:
            taken: set[int] = set()
            for _, length in _episodes(config.burner_rate, config.burner_run, T, master):
                free = [k for k in range(T) if k not in taken]
                picked = sorted(master.choice(free, size=min(length, len(free)), replace=False).tolist())
                taken.update(picked)
                share(g, picked, "decoy")
    if config.phone_noise_rate > 0:
        for g in ill_groups + legit_groups:
            for k in np.flatnonzero(master.random(T) < config.phone_noise_rate).tolist():
                share(g, [k], "noise")

    # alias timeline: node -> list of (alias, first window, last window exclusive)
    intervals: list[list[list]] = [[[f"{_ALIASES[u % len(_ALIASES)]} {u}", 0, T]] for u in range(N)]
    if config.migration_rate > 0:
        fresh_alias = 0
        ill_nodes = np.flatnonzero(illicit)
        for k in range(T - 1):
            targets = ill_nodes[active[k + 1, ill_nodes]]
            for u in ill_nodes.tolist():
                if not master.random() < config.migration_rate:
                    continue
                held = [iv for iv in intervals[u] if iv[1] <= k < iv[2]]
                options = targets[targets != u]
                if not active[k, u] or not held or not len(options):
                    continue
                iv = held[int(master.integers(len(held)))]
                v = int(options[int(master.integers(len(options)))])
                iv[2] = k + 1
                intervals[v].append([iv[0], k + 1, T])
                if not any(j[1] <= k + 1 < j[2] for j in intervals[u]):
                    fresh_alias += 1
                    intervals[u].append([f"{_ALIASES[fresh_alias % len(_ALIASES)]} x{fresh_alias}", k + 1, T])
                motifs.append(MotifEvent("migration", k + 1, (u, v), 1, iv[0]))

    bursts = np.zeros((T, N), dtype=np.int64)
    if config.ad_burst_rate > 0 and config.ad_burst_magnitude > 0:
        for u in np.flatnonzero(illicit).tolist():
            for k in np.flatnonzero(master.random(T) < config.ad_burst_rate).tolist():
                if active[k, u]:
                    bursts[k, u] = config.ad_burst_magnitude
                    motifs.append(MotifEvent("ad_burst", k, (u,), 1, str(config.ad_burst_magnitude)))

    start = config.start_time
    records: list[EntityRecord] = []
    truth: list[NodeTruth] = []
    names = [f"{_NAME_WORDS[u % len(_NAME_WORDS)]} {_NAME_KINDS[(u // len(_NAME_WORDS)) % len(_NAME_KINDS)]} {u}"
             for u in range(N)]
    for u, rng in enumerate(node_rngs):
        owner = int(address_owner[u])
        street = f"{100 + owner} {_STREETS[owner % len(_STREETS)]}"
        suffixes = _SUFFIXES[owner % len(_SUFFIXES)]
        unit = f" Suite {owner % 40 + 1}" if owner % 3 == 0 else ""
        ethnicity = f"group_{int(rng.integers(config.n_ethnicities)) + 1}"
        reviews = int(rng.gamma(2.0, 20.0))
        rate = None if rng.random() < config.rate_missing else float(np.round(rng.uniform(40, 120), 2))
        phone = _PhoneBook.primary(u, int(county[u]))
        county_name = f"County {int(county[u]) + 1:03d}"
        city = f"City {int(county[u]) + 1:03d}"
        truth.append(NodeTruth(u, names[u], normalize_address(street + " " + suffixes[0] + unit),
                               bool(illicit[u]), bool(labeled[u])))

        def emit(kind, k, offset, phone_digits, alias=None, label="unlabeled", raids=None):
            raw_addr = f"{street} {suffixes[int(rng.integers(3))]}{unit}"
            raw_phone = _format_phone(phone_digits, int(rng.integers(5)))
            ts = start + timedelta(seconds=k * WEEK_SECONDS + int(offset))
            records.append(EntityRecord(
                record_id=f"syn-{u}-{k}-{len(records)}", parlor_name=names[u], address_raw=raw_addr,
                address_canon=normalize_address(raw_addr), city=city, county=county_name,
                phone_raw=raw_phone, phone_canon=normalize_phone(raw_phone), owner_ethnicity=ethnicity,
                review_count=reviews, hourly_rate_usd=rate, num_local_raids=raids, alias=alias,
                label=label, timestamp=ts, source_kind=kind))

        windows = np.flatnonzero(active[:, u]).tolist()
        last = windows[-1]
        for k in windows:
            aliases = [iv[0] for iv in intervals[u] if iv[1] <= k < iv[2]]
            extra = shared.get((u, k), [])
            n_ads = int(rng.poisson(config.ad_rate)) + int(bursts[k, u])
            n_raid = int(labeled[u] and k == last)
            n = len(aliases) + len(extra) + n_ads + n_raid
            offsets = np.sort(rng.integers(0, WEEK_SECONDS - n, size=n)) + np.arange(n)
            i = 0
            for alias in aliases:
                emit("listing", k, offsets[i], phone, alias=alias)
                i += 1
            for p in extra:
                emit("listing", k, offsets[i], p)
                i += 1
            for _ in range(n_ads):
                emit("advertisement", k, offsets[i], phone)
                i += 1
            if n_raid:
                emit("raid_report", k, offsets[i], phone, label="raided" if illicit[u] else "not_raided",
                     raids=int(rng.poisson(1.0)))

    records.sort(key=lambda r: (r.timestamp, r.record_id))
    return SyntheticDataset(config, records, truth, motifs, active)


def truth_labels(dataset: SyntheticDataset, keys: list[tuple[str, str]]) -> np.ndarray:
    """Generator class (1 illicit / 0 legit) for each node key, in the given order."""
    by_key = {(t.parlor_name, t.address_canon): int(t.illicit) for t in dataset.truth}
    return np.array([by_key[k] for k in keys], dtype=np.int64)


def config_from_file(path: str | Path) -> ScenarioConfig:
    return ScenarioConfig.from_text(Path(path).read_text(encoding="utf-8"))
