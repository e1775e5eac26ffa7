"""Synthetic trajectories with planted, recoverable structure and exact ceilings.

Patterns
--------
periodic   each user maps (day type, day segment) -> one PoI and always follows it
noisy      follows that map with probability 1 - epsilon, otherwise a uniform PoI
markov     the next PoI's coarse category is a fixed function of the previous PoI's
           coarse category; the PoI is uniform inside that category
mixed      the first ``mixed_fraction`` of users are periodic, the rest markov

Generation draws only integers from a seeded ``numpy.random.Generator``, and
timestamps sit at bin centres so discretization never meets a boundary.
"""

from __future__ import annotations

import datetime as dt
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import DEFAULT_CALENDAR, DayType
from .errors import ConfigError
from .evaluation import MetricsReport, Query
from .ingest import CategoryRow, RawTrajectoryRow

PATTERNS = ("periodic", "noisy", "markov", "mixed")
EPOCH_START = dt.datetime(2024, 1, 1, tzinfo=dt.timezone.utc)  # a Monday
PPM = 1_000_000


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 20
    n_pois: int = 60
    fanouts: tuple = (4, 2, 2)  # coarse count, mid per coarse, fine per mid
    bins_per_day: int = 48
    records_per_user: int = 60
    pattern: str = "periodic"
    epsilon: float = 0.0
    seed: int = 0
    n_segments: int = 4  # contiguous day segments per day type
    n_days: int = 0  # 0 picks enough days for ~6 records a day
    mixed_fraction: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "fanouts", tuple(int(f) for f in self.fanouts))
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if len(self.fanouts) != 3 or min(self.fanouts) < 1:
            raise ConfigError("fanouts must give >= 1 category per level for three levels")
        if not 0.0 <= self.epsilon <= 1.0 or not 0.0 <= self.mixed_fraction <= 1.0:
            raise ConfigError("epsilon and mixed_fraction must lie in [0, 1]")
        if self.bins_per_day < 1 or 1440 % self.bins_per_day:
            raise ConfigError(f"bins_per_day={self.bins_per_day} must divide 1440")
        if not 1 <= self.n_segments <= self.bins_per_day:
            raise ConfigError("n_segments must lie in [1, bins_per_day]")
        if self.n_users < 1 or self.records_per_user < 1:
            raise ConfigError("n_users and records_per_user must be positive")
        if self.days * self.bins_per_day < self.records_per_user:
            raise ConfigError("n_days * bins_per_day must be at least records_per_user")
        if self.uses_periodic and self.n_pois < 2 * self.n_segments:
            raise ConfigError(f"periodic pattern needs {2 * self.n_segments} distinct PoIs, have {self.n_pois}")
        if self.uses_markov and self.n_pois < self.fanouts[0]:
            raise ConfigError(f"markov pattern needs a PoI in each of {self.fanouts[0]} coarse categories")
        if self.n_pois < 1:
            raise ConfigError("n_pois must be positive")

    @property
    def days(self) -> int:
        return self.n_days or max(1, math.ceil(self.records_per_user / 6))

    @property
    def bin_minutes(self) -> int:
        return 1440 // self.bins_per_day

    @property
    def uses_periodic(self) -> bool:
        return self.pattern in ("periodic", "noisy", "mixed")

    @property
    def uses_markov(self) -> bool:
        return self.pattern in ("markov", "mixed")

    @property
    def n_fine(self) -> int:
        return self.fanouts[0] * self.fanouts[1] * self.fanouts[2]

    def user_pattern(self, u: int) -> str:
        if self.pattern == "mixed":
            return "periodic" if u < round(self.mixed_fraction * self.n_users) else "markov"
        return self.pattern

    def regime(self, day_type: int, slot: int) -> int:
        return int(day_type) * self.n_segments + slot * self.n_segments // self.bins_per_day


def user_name(u: int) -> str:
    return f"u{u:05d}"


def poi_name(p: int) -> str:
    return f"p{p:05d}"


def category_tree(spec: SynthSpec):
    """PoI p has fine category p mod n_fine; fine f belongs to mid f // fanout3, mid m to coarse m // fanout2."""
    _, f2, f3 = spec.fanouts
    fine = np.arange(spec.n_pois) % spec.n_fine
    mid = fine // f3
    coarse = mid // f2
    return fine, mid, coarse


@dataclass
class GroundTruth:
    spec: SynthSpec
    user_maps: dict = field(default_factory=dict)  # user id -> list of PoI ids per regime
    transition: list = field(default_factory=list)  # coarse -> next coarse
    poi_coarse: list = field(default_factory=list)
    bayes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "spec": asdict(self.spec),
            "user_maps": self.user_maps,
            "transition": self.transition,
            "poi_coarse": self.poi_coarse,
            "bayes": self.bayes,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruth":
        spec = SynthSpec(**{**data["spec"], "fanouts": tuple(data["spec"]["fanouts"])})
        return cls(spec, data["user_maps"], data["transition"], data["poi_coarse"], data["bayes"])

    def coarse_members(self) -> dict:
        out = {}
        for p, c in enumerate(self.poi_coarse):
            out.setdefault(c, []).append(p)
        return out


def _transition(n_coarse: int, rng) -> list:
    """A fixed coarse->coarse map; a random permutation without fixed points when possible."""
    if n_coarse == 1:
        return [0]
    while True:
        perm = rng.permutation(n_coarse)
        if not (perm == np.arange(n_coarse)).any():
            return [int(x) for x in perm]


def generate(spec: SynthSpec):
    """Returns (trajectory rows, catalog rows, GroundTruth)."""
    rng = np.random.default_rng(spec.seed)
    fine, mid, coarse = category_tree(spec)
    n_coarse = spec.fanouts[0]
    truth = GroundTruth(spec, poi_coarse=[int(c) for c in coarse])
    members = truth.coarse_members()
    if spec.uses_markov:
        truth.transition = _transition(n_coarse, rng)
    catalog = [
        CategoryRow(poi_name(p), f"fine{fine[p]:03d}", f"mid{mid[p]:03d}", f"coarse{coarse[p]:02d}")
        for p in range(spec.n_pois)
    ]
    bin_seconds = spec.bin_minutes * 60
    n_regimes = 2 * spec.n_segments
    threshold = int(round(spec.epsilon * PPM))
    rows = []
    for u in range(spec.n_users):
        cells = np.sort(rng.choice(spec.days * spec.bins_per_day, size=spec.records_per_user, replace=False))
        pattern = spec.user_pattern(u)
        if pattern in ("periodic", "noisy"):
            regime_map = [int(p) for p in rng.choice(spec.n_pois, size=n_regimes, replace=False)]
            truth.user_maps[user_name(u)] = [poi_name(p) for p in regime_map]
        prev = None
        for cell in cells:
            day, slot = divmod(int(cell), spec.bins_per_day)
            ts = int(EPOCH_START.timestamp()) + day * 86400 + slot * bin_seconds + bin_seconds // 2
            day_type = DEFAULT_CALENDAR((EPOCH_START + dt.timedelta(days=day)).date())
            if pattern in ("periodic", "noisy"):
                poi = regime_map[spec.regime(day_type, slot)]
                if pattern == "noisy" and int(rng.integers(0, PPM)) < threshold:
                    poi = int(rng.integers(0, spec.n_pois))
            else:
                if prev is None:
                    poi = int(rng.integers(0, spec.n_pois))
                else:
                    group = members[truth.transition[int(coarse[prev])]]
                    poi = group[int(rng.integers(0, len(group)))]
            rows.append(RawTrajectoryRow(user_name(u), ts, poi_name(poi)))
            prev = poi
    truth.bayes = {"acc@1": _bayes_acc1_closed_form(spec, truth)}
    return rows, catalog, truth


def _bayes_acc1_closed_form(spec: SynthSpec, truth: GroundTruth) -> float:
    """Expected Acc@1 of the Bayes-optimal predictor per record, averaged over users."""
    sizes = {c: len(m) for c, m in truth.coarse_members().items()}
    per_user = []
    for u in range(spec.n_users):
        pattern = spec.user_pattern(u)
        if pattern == "periodic":
            per_user.append(1.0)
        elif pattern == "noisy":
            per_user.append(1.0 - spec.epsilon + spec.epsilon / spec.n_pois)
        else:
            # stationary law of the coarse chain is uniform over categories (it is a permutation)
            per_user.append(float(np.mean([1.0 / sizes[truth.transition[c]] for c in sizes])))
    return float(np.mean(per_user))


def write_dataset(out_dir, rows, catalog, truth: GroundTruth) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "trajectories": os.path.join(out_dir, "trajectories.csv"),
        "catalog": os.path.join(out_dir, "catalog.csv"),
        "truth": os.path.join(out_dir, "truth.json"),
    }
    with open(paths["trajectories"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("user_id,timestamp,poi_id\n")
        for r in rows:
            fh.write(f"{r.user_id},{r.timestamp},{r.poi_id}\n")
    with open(paths["catalog"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write("poi_id,cat1,cat2,cat3\n")
        for c in catalog:
            fh.write(f"{c.poi_id},{c.cat1},{c.cat2},{c.cat3}\n")
    with open(paths["truth"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(truth.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths


def _harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


def _expected_query_stats(truth: GroundTruth, user_id: str, day_type: DayType, slot: int, prev_poi, ks):
    """(E[1/rank], {k: P(rank <= k)}) for the Bayes-optimal ranking of one query."""
    spec = truth.spec
    n = spec.n_pois
    pattern = spec.user_pattern(int(user_id[1:]))
    if pattern in ("periodic", "noisy"):
        eps = spec.epsilon if pattern == "noisy" else 0.0
        top = 1.0 - eps + eps / n
        mrr = top + (eps / n) * (_harmonic(n) - 1.0)
        acc = {k: min(1.0, top + eps * (min(k, n) - 1) / n) for k in ks}
        return mrr, acc
    if prev_poi is None:
        c = n
    else:
        c = len(truth.coarse_members()[truth.transition[truth.poi_coarse[int(prev_poi[1:])]]])
    return _harmonic(c) / c, {k: min(k, c) / c for k in ks}


def bayes_optimal_metrics(truth: GroundTruth, queries, vocab, prev_pois=None, ks=(1, 5, 10)) -> MetricsReport:
    """Expected metrics of the best predictor under the planted law, macro-averaged over users.

    ``prev_pois`` lists each query's previous PoI external id (None for a first
    record); when omitted, queries must carry the previous PoI as aux (variant V1).
    """
    per_user = {}
    for i, q in enumerate(queries):
        q: Query
        if prev_pois is not None:
            prev = prev_pois[i]
        else:
            prev = vocab.external_of(q.aux[0]) if q.aux and q.aux[0].kind.value == "Poi" else None
        mrr, acc = _expected_query_stats(truth, vocab.external_of(q.user), q.bin.day_type, q.bin.slot, prev, ks)
        stats = per_user.setdefault(q.user.index, {"n": 0, "mrr": 0.0, **{f"acc@{k}": 0.0 for k in ks}})
        stats["n"] += 1
        stats["mrr"] += mrr
        for k in ks:
            stats[f"acc@{k}"] += acc[k]
    for stats in per_user.values():
        for key in list(stats):
            if key != "n":
                stats[key] /= stats["n"]
    users = list(per_user.values())
    report = MetricsReport(
        mrr=float(np.mean([s["mrr"] for s in users])),
        acc={k: float(np.mean([s[f"acc@{k}"] for s in users])) for k in ks},
        per_user=per_user,
        n_queries=sum(s["n"] for s in users),
        n_users=len(users),
    )
    report.check()
    return report

