"""Shared vocabulary: entity ids, time bins, facts and the STKG container."""

from __future__ import annotations

import datetime as dt
import enum
from dataclasses import dataclass, field
from typing import NamedTuple
from zoneinfo import ZoneInfo

import numpy as np

from .errors import ConfigError, DataError

MINUTES_PER_DAY = 1440


class EntityKind(enum.Enum):
    USER = "User"
    POI = "Poi"
    TIMEBIN = "TimeBin"
    CAT1 = "Cat1"
    CAT2 = "Cat2"
    CAT3 = "Cat3"
    SENTINEL = "Sentinel"

    @classmethod
    def category(cls, level: int) -> "EntityKind":
        try:
            return {1: cls.CAT1, 2: cls.CAT2, 3: cls.CAT3}[level]
        except KeyError:
            raise ValueError(f"category level must be 1, 2 or 3, got {level!r}") from None

    @property
    def category_level(self) -> int | None:
        return {EntityKind.CAT1: 1, EntityKind.CAT2: 2, EntityKind.CAT3: 3}.get(self)


# Row order of the shared entity matrix. Time bins live in their own table.
ENTITY_ROW_ORDER = (
    EntityKind.SENTINEL,
    EntityKind.USER,
    EntityKind.POI,
    EntityKind.CAT1,
    EntityKind.CAT2,
    EntityKind.CAT3,
)

SENTINEL_NAME = "<none>"


class EntityId(NamedTuple):
    kind: EntityKind
    index: int


SENTINEL = EntityId(EntityKind.SENTINEL, 0)


class DayType(enum.IntEnum):
    WORKING = 0
    NON_WORKING = 1


class TimeBin(NamedTuple):
    slot: int
    day_type: DayType

    def external(self) -> str:
        return f"{'W' if self.day_type == DayType.WORKING else 'N'}{self.slot}"

    @classmethod
    def parse(cls, text: str) -> "TimeBin":
        head, slot = text[0], int(text[1:])
        if head not in "WN":
            raise ValueError(f"bad time-bin id {text!r}")
        return cls(slot, DayType.WORKING if head == "W" else DayType.NON_WORKING)


class Variant(enum.Enum):
    """Auxiliary information attached to mobility facts."""

    V0 = 0  # none
    V1 = 1  # previous PoI
    V2 = 2  # fine category of previous PoI
    V3 = 3  # mid category of previous PoI
    V4 = 4  # coarse category of previous PoI

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, Variant):
            return value
        text = str(value).strip().upper().replace("R_", "")
        if not text.startswith("V"):
            text = "V" + text
        try:
            return cls[text]
        except KeyError:
            raise ConfigError(f"unknown STMPR variant {value!r} (expected V0..V4)") from None

    @property
    def category_level(self) -> int | None:
        return {Variant.V2: 1, Variant.V3: 2, Variant.V4: 3}.get(self)


class Relation(enum.Enum):
    C1 = 1
    C2 = 2
    C3 = 3
    CAT_CAT = 4

    @property
    def row(self) -> int:
        return self.value - 1


def check_bin_minutes(bin_minutes: int) -> int:
    if not isinstance(bin_minutes, (int, np.integer)) or bin_minutes <= 0 or MINUTES_PER_DAY % bin_minutes:
        raise ConfigError(f"bin_minutes={bin_minutes!r} must be a positive divisor of {MINUTES_PER_DAY}")
    return MINUTES_PER_DAY // int(bin_minutes)


@dataclass(frozen=True)
class Calendar:
    """Maps a civil date to a day type: weekends and listed holidays are non-working."""

    holidays: frozenset = frozenset()
    weekend: frozenset = frozenset({5, 6})

    @classmethod
    def from_file(cls, path) -> "Calendar":
        days = set()
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                try:
                    days.add(dt.date.fromisoformat(line))
                except ValueError as exc:
                    raise DataError(f"{path}:{line_no}: bad holiday date {line!r}") from exc
        return cls(holidays=frozenset(days))

    def __call__(self, date: dt.date) -> DayType:
        if date in self.holidays or date.weekday() in self.weekend:
            return DayType.NON_WORKING
        return DayType.WORKING


DEFAULT_CALENDAR = Calendar()


def discretize_timestamp(ts: int, bin_minutes: int = 30, calendar=DEFAULT_CALENDAR, tz="UTC") -> TimeBin:
    """Half-open binning: a timestamp exactly on a boundary starts the later bin."""
    check_bin_minutes(bin_minutes)
    zone = ZoneInfo(tz) if isinstance(tz, str) else tz
    local = dt.datetime.fromtimestamp(int(ts), tz=zone)
    minutes = local.hour * 60 + local.minute
    return TimeBin(minutes // bin_minutes, calendar(local.date()))


def flatten_timebin(bin: TimeBin, bins_per_day: int) -> int:
    if not 0 <= bin.slot < bins_per_day:
        raise ValueError(f"slot {bin.slot} outside [0, {bins_per_day})")
    return int(bin.day_type) * bins_per_day + bin.slot


def unflatten_timebin(index: int, bins_per_day: int) -> TimeBin:
    if not 0 <= index < 2 * bins_per_day:
        raise ValueError(f"time-bin index {index} outside [0, {2 * bins_per_day})")
    return TimeBin(index % bins_per_day, DayType(index // bins_per_day))


@dataclass(frozen=True)
class EntityVocab:
    """Bijective numbering of external ids per entity kind."""

    users: tuple = ()
    pois: tuple = ()
    cat1: tuple = ()
    cat2: tuple = ()
    cat3: tuple = ()
    bins_per_day: int = 48
    _lookup: dict = field(default=None, init=False, repr=False, compare=False)
    _offsets: dict = field(default=None, init=False, repr=False, compare=False)
    _names: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(
            self,
            "_names",
            {
                EntityKind.SENTINEL: (SENTINEL_NAME,),
                EntityKind.USER: tuple(self.users),
                EntityKind.POI: tuple(self.pois),
                EntityKind.CAT1: tuple(self.cat1),
                EntityKind.CAT2: tuple(self.cat2),
                EntityKind.CAT3: tuple(self.cat3),
                EntityKind.TIMEBIN: tuple(
                    unflatten_timebin(i, self.bins_per_day).external() for i in range(2 * self.bins_per_day)
                ),
            },
        )
        lookup = {}
        for kind in (EntityKind.USER, EntityKind.POI, EntityKind.CAT1, EntityKind.CAT2, EntityKind.CAT3):
            names = self.names(kind)
            table = {name: i for i, name in enumerate(names)}
            if len(table) != len(names):
                raise DataError(f"duplicate external ids in {kind.value} vocabulary")
            lookup[kind] = table
        offsets, row = {}, 0
        for kind in ENTITY_ROW_ORDER:
            offsets[kind] = row
            row += self.size(kind)
        object.__setattr__(self, "_lookup", lookup)
        object.__setattr__(self, "_offsets", offsets)

    def names(self, kind: EntityKind) -> tuple:
        return self._names[kind]

    @property
    def n_bins(self) -> int:
        return 2 * self.bins_per_day

    def size(self, kind: EntityKind) -> int:
        return len(self._names[kind])

    @property
    def n_entity_rows(self) -> int:
        return sum(self.size(k) for k in ENTITY_ROW_ORDER)

    def internal_of(self, kind: EntityKind, name: str) -> EntityId:
        if kind is EntityKind.SENTINEL:
            if name != SENTINEL_NAME:
                raise KeyError(name)
            return SENTINEL
        if kind is EntityKind.TIMEBIN:
            return EntityId(kind, flatten_timebin(TimeBin.parse(name), self.bins_per_day))
        return EntityId(kind, self._lookup[kind][name])

    def get(self, kind: EntityKind, name: str) -> EntityId | None:
        try:
            return self.internal_of(kind, name)
        except (KeyError, ValueError):
            return None

    def external_of(self, entity: EntityId) -> str:
        names = self.names(entity.kind)
        if not 0 <= entity.index < len(names):
            raise KeyError(entity)
        return names[entity.index]

    def row(self, entity: EntityId) -> int:
        """Row of a non-time entity in the shared entity matrix."""
        if entity.kind is EntityKind.TIMEBIN:
            raise ValueError("time bins are not stored in the entity matrix")
        if not 0 <= entity.index < self.size(entity.kind):
            raise KeyError(entity)
        return self._offsets[entity.kind] + entity.index

    def offset(self, kind: EntityKind) -> int:
        return self._offsets[kind]

    def entity_of_row(self, row: int) -> EntityId:
        for kind in ENTITY_ROW_ORDER:
            if 0 <= row - self._offsets[kind] < self.size(kind):
                return EntityId(kind, row - self._offsets[kind])
        raise KeyError(row)

    def category_names(self, level: int) -> tuple:
        return self.names(EntityKind.category(level))

    def to_dict(self) -> dict:
        return {
            "bins_per_day": self.bins_per_day,
            "users": list(self.users),
            "pois": list(self.pois),
            "cat1": list(self.cat1),
            "cat2": list(self.cat2),
            "cat3": list(self.cat3),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EntityVocab":
        return cls(
            users=tuple(data["users"]),
            pois=tuple(data["pois"]),
            cat1=tuple(data["cat1"]),
            cat2=tuple(data["cat2"]),
            cat3=tuple(data["cat3"]),
            bins_per_day=int(data["bins_per_day"]),
        )


class MobilityRecord(NamedTuple):
    user: EntityId
    poi: EntityId
    timestamp: int
    bin: TimeBin


class StmprFact(NamedTuple):
    user: EntityId
    poi: EntityId
    bin: TimeBin
    aux: tuple
    variant: Variant


class AffiliationFact(NamedTuple):
    subject: EntityId
    relation: Relation
    object: EntityId


def check_stmpr_fact(fact: StmprFact) -> None:
    expected = {
        Variant.V0: None,
        Variant.V1: EntityKind.POI,
        Variant.V2: EntityKind.CAT1,
        Variant.V3: EntityKind.CAT2,
        Variant.V4: EntityKind.CAT3,
    }[fact.variant]
    if expected is None:
        if fact.aux:
            raise ValueError("variant V0 takes no auxiliary entity")
        return
    if len(fact.aux) != 1 or fact.aux[0].kind not in (expected, EntityKind.SENTINEL):
        raise ValueError(f"variant {fact.variant.name} needs one {expected.value} or sentinel aux, got {fact.aux}")


def check_affiliation_fact(fact: AffiliationFact) -> None:
    if fact.relation is Relation.CAT_CAT:
        a, b = fact.subject.kind.category_level, fact.object.kind.category_level
        if a is None or b is None or b != a + 1:
            raise ValueError(f"category affiliation must link level i to i+1: {fact}")
        return
    if fact.subject.kind is not EntityKind.POI or fact.object.kind is not EntityKind.category(fact.relation.value):
        raise ValueError(f"relation {fact.relation.name} links a PoI to a level-{fact.relation.value} category")


GRAPH_PARTS = ("V", "C1", "C2", "C3", "CC")


def parse_graph_parts(value) -> frozenset:
    """'V,C1,C3' / 'V+C' / 'all' -> frozenset of part names. 'C' expands to C1..C3."""
    if isinstance(value, (set, frozenset, list, tuple)):
        items = list(value)
    else:
        text = str(value).strip()
        if text.lower() == "all":
            return frozenset({"V", "C1", "C2", "C3"})
        items = [s for s in text.replace("+", ",").replace(" ", ",").split(",") if s]
    parts = set()
    for item in items:
        item = str(item).strip().upper().replace("G^", "").replace("'", "C").replace("CPRIME", "CC")
        if item == "C":
            parts.update({"C1", "C2", "C3"})
        elif item in GRAPH_PARTS:
            parts.add(item)
        else:
            raise ConfigError(f"unknown graph part {item!r}; expected one of {GRAPH_PARTS} or 'C'")
    if "V" not in parts:
        raise ConfigError("graph parts must include V (mobility pattern facts)")
    return frozenset(parts)


@dataclass(frozen=True)
class FactArrays:
    """Integer view of the fact lists used by the vectorized trainer."""

    user: np.ndarray
    poi: np.ndarray
    bin: np.ndarray
    aux: np.ndarray  # entity row, -1 when the variant has no aux
    aff_subject: np.ndarray
    aff_relation: np.ndarray
    aff_object: np.ndarray

    @property
    def n_stmpr(self) -> int:
        return len(self.user)

    @property
    def n_affiliation(self) -> int:
        return len(self.aff_subject)


@dataclass(frozen=True)
class Stkg:
    stmpr_facts: tuple
    affiliation_facts: dict  # level (1..3) -> tuple of AffiliationFact
    cat_affiliation_facts: tuple | None
    vocab: EntityVocab
    variant: Variant
    parts: frozenset = frozenset({"V"})

    def __post_init__(self):
        for fact in self.stmpr_facts:
            if fact.variant is not self.variant:
                raise ValueError("mixed STMPR variants in one graph")
            for entity in (fact.user, fact.poi, *fact.aux):
                self.vocab.row(entity)
            flatten_timebin(fact.bin, self.vocab.bins_per_day)
        for facts in list(self.affiliation_facts.values()) + [self.cat_affiliation_facts or ()]:
            for fact in facts:
                self.vocab.row(fact.subject)
                self.vocab.row(fact.object)

    def selected_affiliation(self) -> list:
        """Affiliation facts of the requested graph parts, in level order."""
        out = []
        for level in (1, 2, 3):
            if f"C{level}" in self.parts:
                out.extend(self.affiliation_facts.get(level, ()))
        if "CC" in self.parts and self.cat_affiliation_facts:
            out.extend(self.cat_affiliation_facts)
        return out

    def counts(self) -> dict:
        counts = {"V": len(self.stmpr_facts)}
        for level in (1, 2, 3):
            counts[f"C{level}"] = len(self.affiliation_facts.get(level, ()))
        counts["CC"] = len(self.cat_affiliation_facts or ())
        return counts

    def arrays(self) -> FactArrays:
        vocab = self.vocab
        n = len(self.stmpr_facts)
        user = np.empty(n, dtype=np.int64)
        poi = np.empty(n, dtype=np.int64)
        bins = np.empty(n, dtype=np.int64)
        aux = np.full(n, -1, dtype=np.int64)
        for i, fact in enumerate(self.stmpr_facts):
            user[i] = vocab.row(fact.user)
            poi[i] = vocab.row(fact.poi)
            bins[i] = flatten_timebin(fact.bin, vocab.bins_per_day)
            if fact.aux:
                aux[i] = vocab.row(fact.aux[0])
        aff = self.selected_affiliation()
        return FactArrays(
            user=user,
            poi=poi,
            bin=bins,
            aux=aux,
            aff_subject=np.array([vocab.row(f.subject) for f in aff], dtype=np.int64),
            aff_relation=np.array([f.relation.row for f in aff], dtype=np.int64),
            aff_object=np.array([vocab.row(f.object) for f in aff], dtype=np.int64),
        )

