"""Trajectory and catalog parsing, filtering, chronological split and fact construction."""

from __future__ import annotations

import bisect
import datetime as dt
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence
from zoneinfo import ZoneInfo

from .core import (
    DEFAULT_CALENDAR,
    SENTINEL,
    AffiliationFact,
    EntityId,
    EntityKind,
    EntityVocab,
    MobilityRecord,
    Relation,
    StmprFact,
    Stkg,
    TimeBin,
    Variant,
    check_bin_minutes,
    parse_graph_parts,
)
from .errors import ConfigError, DataError, ParseError

logger = logging.getLogger(__name__)


class RawTrajectoryRow(NamedTuple):
    user_id: str
    timestamp: int  # epoch seconds
    poi_id: str
    line_no: int = 0


class CategoryRow(NamedTuple):
    poi_id: str
    cat1: str
    cat2: str | None = None
    cat3: str | None = None

    def level(self, i: int) -> str | None:
        return (self.cat1, self.cat2, self.cat3)[i - 1]


def parse_timestamp(value, tz="UTC") -> int:
    """Epoch seconds from an integer or an ISO-8601 string; naive ISO times use ``tz``."""
    if isinstance(value, int):
        return value
    text = str(value).strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return int(text)
    except ValueError:
        pass
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    moment = dt.datetime.fromisoformat(text)
    if moment.tzinfo is None:
        moment = moment.replace(tzinfo=ZoneInfo(tz) if isinstance(tz, str) else tz)
    return int(moment.timestamp())


def _split_line(line: str) -> tuple:
    if line.lstrip().startswith("{"):
        obj = json.loads(line)
        return obj.get("user_id"), obj.get("timestamp"), obj.get("poi_id")
    parts = [p.strip() for p in line.split(",")]
    if len(parts) != 3:
        raise ValueError(f"expected 3 comma-separated fields, got {len(parts)}")
    return tuple(parts)


def _looks_like_header(line: str) -> bool:
    fields = [p.strip().lower() for p in line.split(",")]
    return len(fields) == 3 and fields[1] in ("timestamp", "time", "ts", "datetime")


def parse_trajectories(path, *, tz="UTC", lenient=False, skipped: list | None = None) -> list:
    """Read ``user_id,timestamp,poi_id`` lines (or JSON lines with the same keys).

    In lenient mode malformed lines are logged and appended to ``skipped`` as
    ``(line_no, message)`` instead of raising.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if line_no == 1 and _looks_like_header(line):
                continue
            try:
                user_id, ts, poi_id = _split_line(line)
                user_id = "" if user_id is None else str(user_id).strip()
                poi_id = "" if poi_id is None else str(poi_id).strip()
                if not user_id:
                    raise ValueError("empty user_id")
                if not poi_id:
                    raise ValueError("empty poi_id")
                if ts is None:
                    raise ValueError("missing timestamp")
                rows.append(RawTrajectoryRow(user_id, parse_timestamp(ts, tz), poi_id, line_no))
            except (ValueError, json.JSONDecodeError) as exc:
                if not lenient:
                    raise ParseError(str(exc), line_no=line_no, path=path) from exc
                logger.warning("%s:%d: skipped malformed line (%s)", path, line_no, exc)
                if skipped is not None:
                    skipped.append((line_no, str(exc)))
    return rows


def write_trajectories(path, rows: Sequence[RawTrajectoryRow]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,timestamp,poi_id\n")
        for row in rows:
            fh.write(f"{row.user_id},{row.timestamp},{row.poi_id}\n")


@dataclass(frozen=True)
class Catalog:
    """PoI -> (cat1, cat2, cat3) with missing levels as None."""

    entries: dict = field(default_factory=dict)

    @classmethod
    def from_rows(cls, rows: Sequence[CategoryRow]) -> "Catalog":
        entries = {}
        for row in rows:
            prev = entries.get(row.poi_id)
            if prev is not None and prev != row:
                raise DataError(f"PoI {row.poi_id!r} listed with conflicting categories: {prev[1:]} vs {row[1:]}")
            entries[row.poi_id] = row
        return cls(entries)

    @property
    def levels(self) -> tuple:
        """Category levels present in at least one row."""
        return tuple(i for i in (1, 2, 3) if any(r.level(i) for r in self.entries.values()))

    def category(self, poi_id: str, level: int) -> str | None:
        row = self.entries.get(poi_id)
        return None if row is None else row.level(level)

    def names(self, level: int) -> tuple:
        return tuple(sorted({r.level(level) for r in self.entries.values() if r.level(level)}))

    def __len__(self):
        return len(self.entries)


def parse_catalog(path) -> Catalog:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if line_no == 1 and parts[0].lower() in ("poi_id", "poi"):
                continue
            if not 2 <= len(parts) <= 4:
                raise ParseError(f"expected poi_id,cat1[,cat2[,cat3]], got {len(parts)} fields", line_no, path)
            parts += [""] * (4 - len(parts))
            poi_id, c1, c2, c3 = parts
            if not poi_id or not c1:
                raise ParseError("poi_id and cat1 are required", line_no, path)
            if c3 and not c2:
                raise ParseError("cat3 given without cat2", line_no, path)
            rows.append(CategoryRow(poi_id, c1, c2 or None, c3 or None))
    return Catalog.from_rows(rows)


def write_catalog(path, catalog: Catalog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for poi_id in sorted(catalog.entries):
            row = catalog.entries[poi_id]
            fh.write(",".join(c for c in row if c) + "\n")


def filter_users(rows: Sequence[RawTrajectoryRow], min_records: int, min_places: int) -> list:
    """Keep users with at least ``min_records`` records and ``min_places`` distinct PoIs."""
    if min_records < 0 or min_places < 0:
        raise ConfigError("filter thresholds must be non-negative")
    records = Counter(r.user_id for r in rows)
    places = defaultdict(set)
    for r in rows:
        places[r.user_id].add(r.poi_id)
    keep = {u for u, n in records.items() if n >= min_records and len(places[u]) >= min_places}
    return [r for r in rows if r.user_id in keep]


@dataclass(frozen=True)
class SplitDataset:
    """Per-user chronological train/valid/test partitions, keyed by user index."""

    train: dict
    valid: dict
    test: dict
    dropped_users: tuple = ()

    @property
    def users(self) -> list:
        return sorted(set(self.train) | set(self.valid) | set(self.test))

    def history(self, user: int, upto: str = "test") -> list:
        parts = ("train", "valid", "test")[: ("train", "valid", "test").index(upto) + 1]
        out = []
        for name in parts:
            out.extend(getattr(self, name).get(user, ()))
        return out

    def n_records(self, name: str) -> int:
        return sum(len(v) for v in getattr(self, name).values())


def split_sizes(n: int, ratios=(0.7, 0.1, 0.2)) -> tuple:
    n_train = int(n * ratios[0] + 1e-9)
    n_valid = int(n * ratios[1] + 1e-9)
    return n_train, n_valid, n - n_train - n_valid


def split_chronological(records_by_user: dict, ratios=(0.7, 0.1, 0.2)) -> SplitDataset:
    """Train gets the first floor(0.7 n) records, valid the next floor(0.1 n), test the rest."""
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    train, valid, test, dropped = {}, {}, {}, []
    for user in sorted(records_by_user):
        recs = sorted(records_by_user[user], key=lambda r: r.timestamp)
        if len(recs) < 3:
            logger.warning("user %s has %d records (< 3); dropped from the split", user, len(recs))
            dropped.append(user)
            continue
        n_train, n_valid, _ = split_sizes(len(recs), ratios)
        train[user] = tuple(recs[:n_train])
        valid[user] = tuple(recs[n_train : n_train + n_valid])
        test[user] = tuple(recs[n_train + n_valid :])
    return SplitDataset(train, valid, test, tuple(dropped))


def most_recent_poi(trajectory: Sequence[MobilityRecord], target_index: int) -> EntityId:
    """PoI of the latest record strictly earlier than the target record, else the sentinel."""
    if not 0 <= target_index < len(trajectory):
        raise IndexError(target_index)
    return predecessor_before(trajectory, trajectory[target_index].timestamp)


def predecessor_before(trajectory: Sequence[MobilityRecord], timestamp: int, _keys=None) -> EntityId:
    keys = _keys if _keys is not None else [r.timestamp for r in trajectory]
    pos = bisect.bisect_left(keys, timestamp)
    return trajectory[pos - 1].poi if pos else SENTINEL


class CategoryIndex:
    """PoI entity -> category entity per level, against a fixed vocabulary."""

    def __init__(self, catalog: Catalog | None, vocab: EntityVocab):
        self.levels = catalog.levels if catalog is not None else ()
        self._map = {1: {}, 2: {}, 3: {}}
        if catalog is None:
            return
        for i, poi_id in enumerate(vocab.pois):
            for level in (1, 2, 3):
                name = catalog.category(poi_id, level)
                if name is not None:
                    self._map[level][i] = vocab.internal_of(EntityKind.category(level), name)

    def category(self, poi: EntityId, level: int) -> EntityId | None:
        return self._map[level].get(poi.index)


def check_variant(variant: Variant, catalog: Catalog | None) -> None:
    level = variant.category_level
    if level is None:
        return
    have = catalog.levels if catalog is not None else ()
    if level not in have:
        names = {1: "fine (cat1)", 2: "mid (cat2)", 3: "coarse (cat3)"}
        raise ConfigError(f"variant {variant.name} needs {names[level]} categories, which the catalog lacks")


def aux_for(variant: Variant, prev: EntityId, categories: CategoryIndex | None) -> tuple:
    if variant is Variant.V0:
        return ()
    if variant is Variant.V1 or prev == SENTINEL:
        return (prev,)
    cat = categories.category(prev, variant.category_level) if categories is not None else None
    return (cat if cat is not None else SENTINEL,)


def build_stmpr_facts(split: SplitDataset, variant: Variant, catalog: Catalog | None, vocab: EntityVocab) -> list:
    """One fact per training record; predecessors come from the training partition only."""
    variant = Variant.parse(variant)
    check_variant(variant, catalog)
    categories = CategoryIndex(catalog, vocab) if variant.category_level else None
    facts = []
    for user in sorted(split.train):
        recs = split.train[user]
        keys = [r.timestamp for r in recs]
        for rec in recs:
            prev = predecessor_before(recs, rec.timestamp, keys)
            facts.append(StmprFact(rec.user, rec.poi, rec.bin, aux_for(variant, prev, categories), variant))
    return facts


@dataclass
class CoverageReport:
    pois_without_catalog: list = field(default_factory=list)
    filtered_users: list = field(default_factory=list)  # (user_id, n_records, n_places)
    split_dropped_users: list = field(default_factory=list)
    skipped_lines: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"pois_without_catalog: {len(self.pois_without_catalog)}"]
        lines += [f"  {p}" for p in self.pois_without_catalog]
        lines.append(f"users_removed_by_filter: {len(self.filtered_users)}")
        lines += [f"  {u} records={n} places={m}" for u, n, m in self.filtered_users]
        lines.append(f"users_dropped_by_split: {len(self.split_dropped_users)}")
        lines += [f"  {u}" for u in self.split_dropped_users]
        lines.append(f"skipped_lines: {len(self.skipped_lines)}")
        lines += [f"  line {n}: {msg}" for n, msg in self.skipped_lines]
        return "\n".join(lines) + "\n"


def build_affiliation_facts(catalog: Catalog | None, vocab: EntityVocab, report: CoverageReport | None = None) -> dict:
    """PoI -> category triples for every vocabulary PoI and every level it has."""
    out = {1: [], 2: [], 3: []}
    missing = []
    for i, poi_id in enumerate(vocab.pois):
        row = catalog.entries.get(poi_id) if catalog is not None else None
        if row is None:
            missing.append(poi_id)
            continue
        for level in (1, 2, 3):
            name = row.level(level)
            if name:
                cat = vocab.internal_of(EntityKind.category(level), name)
                out[level].append(AffiliationFact(EntityId(EntityKind.POI, i), Relation(level), cat))
    if report is not None:
        report.pois_without_catalog = missing
    return {level: tuple(facts) for level, facts in out.items()}


def build_cat_affiliation_facts(catalog: Catalog, vocab: EntityVocab, *, require_levels=True) -> tuple:
    """Deduplicated fine->mid and mid->coarse triples; conflicting parents are an error."""
    if len(catalog.levels) < 2:
        if require_levels:
            raise ConfigError("category affiliation facts need a catalog with at least two levels")
        return ()
    parents = {1: defaultdict(set), 2: defaultdict(set)}
    for row in catalog.entries.values():
        for level in (1, 2):
            child, parent = row.level(level), row.level(level + 1)
            if child and parent:
                parents[level][child].add(parent)
    conflicts = [
        f"level {lvl} '{c}' -> {sorted(ps)}" for lvl in (1, 2) for c, ps in sorted(parents[lvl].items()) if len(ps) > 1
    ]
    if conflicts:
        raise DataError("categories with conflicting parents: " + "; ".join(conflicts))
    facts = []
    for level in (1, 2):
        for child in sorted(parents[level]):
            (parent,) = parents[level][child]
            subj = vocab.get(EntityKind.category(level), child)
            obj = vocab.get(EntityKind.category(level + 1), parent)
            if subj is not None and obj is not None:
                facts.append(AffiliationFact(subj, Relation.CAT_CAT, obj))
    return tuple(facts)


@dataclass(frozen=True)
class IngestConfig:
    bin_minutes: int = 30
    tz: str = "UTC"
    holidays: tuple = ()
    min_records: int = 30
    min_places: int = 5
    ratios: tuple = (0.7, 0.1, 0.2)
    keep_last_per_bin: bool = False
    variant: Variant = Variant.V0
    parts: frozenset = frozenset({"V"})

    def __post_init__(self):
        check_bin_minutes(self.bin_minutes)
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "parts", parse_graph_parts(self.parts))
        ZoneInfo(self.tz)

    @property
    def bins_per_day(self) -> int:
        return check_bin_minutes(self.bin_minutes)

    def calendar(self):
        if not self.holidays:
            return DEFAULT_CALENDAR
        return type(DEFAULT_CALENDAR)(holidays=frozenset(dt.date.fromisoformat(str(d)) for d in self.holidays))

    def to_dict(self) -> dict:
        return {
            "bin_minutes": self.bin_minutes,
            "tz": self.tz,
            "holidays": list(self.holidays),
            "min_records": self.min_records,
            "min_places": self.min_places,
            "ratios": list(self.ratios),
            "keep_last_per_bin": self.keep_last_per_bin,
            "variant": self.variant.name,
            "parts": sorted(self.parts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "IngestConfig":
        data = dict(data)
        data["holidays"] = tuple(data.get("holidays", ()))
        data["ratios"] = tuple(data.get("ratios", (0.7, 0.1, 0.2)))
        return cls(**data)


class Dataset(NamedTuple):
    stkg: Stkg
    split: SplitDataset
    catalog: Catalog | None
    config: IngestConfig
    coverage: CoverageReport


def _records_by_user(rows, vocab: EntityVocab, config: IngestConfig) -> dict:
    zone = ZoneInfo(config.tz)
    calendar = config.calendar()
    bin_minutes = config.bin_minutes
    by_user = defaultdict(list)
    for row in sorted(rows, key=lambda r: (r.user_id, r.timestamp)):
        user = vocab.internal_of(EntityKind.USER, row.user_id)
        local = dt.datetime.fromtimestamp(row.timestamp, tz=zone)
        slot = (local.hour * 60 + local.minute) // bin_minutes
        rec = MobilityRecord(
            user, vocab.internal_of(EntityKind.POI, row.poi_id), row.timestamp, TimeBin(slot, calendar(local.date()))
        )
        if config.keep_last_per_bin:
            key = (local.date(), slot)
            prev = by_user[user.index]
            if prev and prev[-1][0] == key:
                prev[-1] = (key, rec)
            else:
                prev.append((key, rec))
        else:
            by_user[user.index].append((None, rec))
    return {u: [rec for _, rec in recs] for u, recs in by_user.items()}


def build_dataset(rows: Sequence[RawTrajectoryRow], catalog: Catalog | None, config: IngestConfig) -> Dataset:
    """Filter, split and turn raw rows into an STKG plus the held-out partitions."""
    if not rows:
        raise DataError("no trajectory records")
    needs_catalog = config.variant.category_level is not None or any(p != "V" for p in config.parts)
    if needs_catalog and catalog is None:
        raise ConfigError("a category catalog is required for category variants or C graph parts (--catalog)")
    check_variant(config.variant, catalog)
    report = CoverageReport()
    kept = filter_users(rows, config.min_records, config.min_places)
    kept_users = {r.user_id for r in kept}
    counts, places = Counter(r.user_id for r in rows), defaultdict(set)
    for r in rows:
        places[r.user_id].add(r.poi_id)
    report.filtered_users = [(u, counts[u], len(places[u])) for u in sorted(counts) if u not in kept_users]
    if not kept:
        raise DataError("every user was removed by filtering")

    pois = sorted({r.poi_id for r in kept})
    cats = {1: (), 2: (), 3: ()}
    if catalog is not None:
        for level in (1, 2, 3):
            cats[level] = tuple(sorted({catalog.category(p, level) for p in pois} - {None}))
        for level in (1, 2):
            parents = {catalog.entries[p].level(level + 1) for p in pois if p in catalog.entries} - {None}
            cats[level + 1] = tuple(sorted(set(cats[level + 1]) | parents))
    vocab = EntityVocab(
        users=tuple(sorted(kept_users)),
        pois=tuple(pois),
        cat1=cats[1],
        cat2=cats[2],
        cat3=cats[3],
        bins_per_day=config.bins_per_day,
    )
    split = split_chronological(_records_by_user(kept, vocab, config), config.ratios)
    report.split_dropped_users = [vocab.users[u] for u in split.dropped_users]
    if not split.train:
        raise DataError("no users left with enough records to split")
    stmpr = build_stmpr_facts(split, config.variant, catalog, vocab)
    affiliation = build_affiliation_facts(catalog, vocab, report) if catalog is not None else {1: (), 2: (), 3: ()}
    if catalog is None:
        report.pois_without_catalog = list(vocab.pois)
    cat_aff = None
    if "CC" in config.parts:
        cat_aff = build_cat_affiliation_facts(catalog, vocab)
    stkg = Stkg(tuple(stmpr), affiliation, cat_aff, vocab, config.variant, config.parts)
    return Dataset(stkg, split, catalog, config, report)


def rebuild_for_variant(dataset: Dataset, variant=None, parts=None) -> Dataset:
    """Same split and vocabulary, different auxiliary variant and/or graph composition."""
    changes = {}
    if variant is not None:
        changes["variant"] = Variant.parse(variant)
    if parts is not None:
        changes["parts"] = parse_graph_parts(parts)
    config = IngestConfig.from_dict({**dataset.config.to_dict(), **changes})
    needs_catalog = config.variant.category_level is not None or any(p != "V" for p in config.parts)
    if needs_catalog and dataset.catalog is None:
        raise ConfigError("a category catalog is required for category variants or C graph parts")
    old = dataset.stkg
    stmpr = build_stmpr_facts(dataset.split, config.variant, dataset.catalog, old.vocab)
    cat_aff = old.cat_affiliation_facts
    if "CC" in config.parts and cat_aff is None:
        cat_aff = build_cat_affiliation_facts(dataset.catalog, old.vocab)
    stkg = Stkg(tuple(stmpr), old.affiliation_facts, cat_aff, old.vocab, config.variant, config.parts)
    return Dataset(stkg, dataset.split, dataset.catalog, config, dataset.coverage)
