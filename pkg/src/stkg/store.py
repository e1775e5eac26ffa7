"""On-disk layout of a built knowledge graph directory.

::

    kg/
      meta.json              ingest config, variant, graph parts, fact counts, input digests
      vocab.json             external ids per entity kind
      stmpr_facts.csv        user_id,poi_id,bin,aux
      affiliation_facts.csv  subject_kind,subject,relation,object_kind,object
      split.csv              partition,user_id,timestamp,poi_id,bin
      catalog.csv            copy of the category catalog (when one was given)
      coverage.txt           missing catalog entries and filtered users
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from collections import defaultdict

from . import __version__
from .core import (
    SENTINEL,
    SENTINEL_NAME,
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
)
from .errors import DataError
from .ingest import CoverageReport, Dataset, IngestConfig, SplitDataset, parse_catalog, write_catalog

PARTITIONS = ("train", "valid", "test")
_AUX_KIND = {Variant.V1: EntityKind.POI, Variant.V2: EntityKind.CAT1, Variant.V3: EntityKind.CAT2, Variant.V4: EntityKind.CAT3}


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, data) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(dataset: Dataset, out_dir, inputs: dict | None = None) -> dict:
    """Persist ``dataset`` under ``out_dir``; returns the meta record."""
    os.makedirs(out_dir, exist_ok=True)
    stkg, vocab = dataset.stkg, dataset.stkg.vocab
    _write_json(os.path.join(out_dir, "vocab.json"), vocab.to_dict())

    with open(os.path.join(out_dir, "stmpr_facts.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_id", "poi_id", "bin", "aux"])
        for f in stkg.stmpr_facts:
            aux = vocab.external_of(f.aux[0]) if f.aux else ""
            w.writerow([vocab.external_of(f.user), vocab.external_of(f.poi), f.bin.external(), aux])

    with open(os.path.join(out_dir, "affiliation_facts.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_kind", "subject", "relation", "object_kind", "object"])
        facts = [f for level in (1, 2, 3) for f in stkg.affiliation_facts.get(level, ())]
        facts += list(stkg.cat_affiliation_facts or ())
        for f in facts:
            w.writerow(
                [f.subject.kind.value, vocab.external_of(f.subject), f.relation.name,
                 f.object.kind.value, vocab.external_of(f.object)]
            )

    with open(os.path.join(out_dir, "split.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["partition", "user_id", "timestamp", "poi_id", "bin"])
        for name in PARTITIONS:
            part = getattr(dataset.split, name)
            for user in sorted(part):
                for rec in part[user]:
                    w.writerow([name, vocab.external_of(rec.user), rec.timestamp, vocab.external_of(rec.poi), rec.bin.external()])

    if dataset.catalog is not None:
        write_catalog(os.path.join(out_dir, "catalog.csv"), dataset.catalog)
    with open(os.path.join(out_dir, "coverage.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dataset.coverage.to_text())

    meta = {
        "version": __version__,
        "ingest": dataset.config.to_dict(),
        "variant": stkg.variant.name,
        "parts": sorted(stkg.parts),
        "has_cat_affiliation": stkg.cat_affiliation_facts is not None,
        "counts": stkg.counts(),
        "split_counts": {name: dataset.split.n_records(name) for name in PARTITIONS},
        "dropped_users": [vocab.users[u] for u in dataset.split.dropped_users],
        "inputs": inputs or {},
    }
    _write_json(os.path.join(out_dir, "meta.json"), meta)
    return meta


def _need(path):
    if not os.path.exists(path):
        raise DataError(f"{path}: missing; is this a directory written by build-kg?")
    return path


def _lookup(vocab: EntityVocab, kind: EntityKind, name: str, where: str) -> EntityId:
    if kind is EntityKind.SENTINEL or name == SENTINEL_NAME:
        return SENTINEL
    entity = vocab.get(kind, name)
    if entity is None:
        raise DataError(f"{where}: unknown {kind.value} {name!r}")
    return entity


def load_dataset(kg_dir) -> Dataset:
    with open(_need(os.path.join(kg_dir, "meta.json")), encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(_need(os.path.join(kg_dir, "vocab.json")), encoding="utf-8") as fh:
        vocab = EntityVocab.from_dict(json.load(fh))
    config = IngestConfig.from_dict(meta["ingest"])
    variant = Variant[meta["variant"]]

    path = _need(os.path.join(kg_dir, "stmpr_facts.csv"))
    stmpr = []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), 2):
            where = f"{path}:{line_no}"
            aux = ()
            if variant is not Variant.V0:
                aux = (_lookup(vocab, _AUX_KIND[variant], row["aux"], where),)
            stmpr.append(
                StmprFact(
                    _lookup(vocab, EntityKind.USER, row["user_id"], where),
                    _lookup(vocab, EntityKind.POI, row["poi_id"], where),
                    TimeBin.parse(row["bin"]),
                    aux,
                    variant,
                )
            )

    path = _need(os.path.join(kg_dir, "affiliation_facts.csv"))
    affiliation, cat_aff = {1: [], 2: [], 3: []}, []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), 2):
            where = f"{path}:{line_no}"
            rel = Relation[row["relation"]]
            fact = AffiliationFact(
                _lookup(vocab, EntityKind(row["subject_kind"]), row["subject"], where),
                rel,
                _lookup(vocab, EntityKind(row["object_kind"]), row["object"], where),
            )
            if rel is Relation.CAT_CAT:
                cat_aff.append(fact)
            else:
                affiliation[rel.value].append(fact)

    parts = {name: defaultdict(list) for name in PARTITIONS}
    path = _need(os.path.join(kg_dir, "split.csv"))
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, row in enumerate(csv.DictReader(fh), 2):
            where = f"{path}:{line_no}"
            user = _lookup(vocab, EntityKind.USER, row["user_id"], where)
            rec = MobilityRecord(
                user,
                _lookup(vocab, EntityKind.POI, row["poi_id"], where),
                int(row["timestamp"]),
                TimeBin.parse(row["bin"]),
            )
            parts[row["partition"]][user.index].append(rec)
    dropped = tuple(vocab.internal_of(EntityKind.USER, u).index for u in meta.get("dropped_users", ()))
    split = SplitDataset(*({u: tuple(r) for u, r in parts[n].items()} for n in PARTITIONS), dropped)

    catalog = None
    if os.path.exists(os.path.join(kg_dir, "catalog.csv")):
        catalog = parse_catalog(os.path.join(kg_dir, "catalog.csv"))
    stkg = Stkg(
        tuple(stmpr),
        {k: tuple(v) for k, v in affiliation.items()},
        tuple(cat_aff) if meta.get("has_cat_affiliation") else None,
        vocab,
        variant,
        frozenset(meta["parts"]),
    )
    return Dataset(stkg, split, catalog, config, CoverageReport())


def load_meta(kg_dir) -> dict:
    with open(_need(os.path.join(kg_dir, "meta.json")), encoding="utf-8") as fh:
        return json.load(fh)

