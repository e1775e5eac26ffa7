"""Complex embedding tables, time-modulated relation vectors and fact scoring.

A mobility fact (u, p, t, A) scores Re(sum_i u_i * r_i(t, A) * conj(p_i)) where

    r(t, A) = concat(r_mod * conj(t), r_static) * prod_{e in A} e

``r_mod`` has ``d1 = round(alpha * d)`` entries and is the only block that sees
the time-bin embedding. An affiliation fact (p, r_Ci, c) scores
Re(sum_i p_i * r_Ci_i * conj(c_i)).

Parameters are stored as complex numpy arrays (interleaved re/im pairs); all
arithmetic is done in complex128 whatever the storage precision.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ENTITY_ROW_ORDER, EntityId, EntityKind, EntityVocab, Relation, TimeBin, flatten_timebin
from .errors import ConfigError, DataError

FORMAT_VERSION = 1
MAGIC = b"STKGEMB\x01"
DTYPES = {32: np.complex64, 64: np.complex128}


def d1_for(alpha: float, d: int) -> int:
    """Number of time-modulated dimensions, rounding half up."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha={alpha} outside [0, 1]")
    return min(d, int(math.floor(alpha * d + 0.5 + 1e-12)))


@dataclass
class ComplexEmbeddingTable:
    vocab: EntityVocab
    d: int
    d1: int
    entity: np.ndarray  # (n_entity_rows, d): sentinel, users, pois, cat1, cat2, cat3
    time: np.ndarray  # (n_bins, d1)
    rel_v: np.ndarray  # (1, d): first d1 entries modulated by time
    rel_c: np.ndarray  # (4, d): C1, C2, C3, category->category
    seed: int = 0
    meta: dict = field(default_factory=dict)

    PARAM_NAMES = ("entity", "time", "rel_v", "rel_c")

    def __post_init__(self):
        if not 0 <= self.d1 <= self.d:
            raise ValueError(f"d1={self.d1} outside [0, {self.d}]")
        expected = {
            "entity": (self.vocab.n_entity_rows, self.d),
            "time": (self.vocab.n_bins, self.d1),
            "rel_v": (1, self.d),
            "rel_c": (len(Relation), self.d),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if arr.dtype != self.entity.dtype:
                raise ValueError("all parameter arrays must share one dtype")

    @property
    def alpha(self) -> float:
        return self.d1 / self.d

    @property
    def precision(self) -> int:
        return 32 if self.entity.dtype == np.complex64 else 64

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def copy(self) -> "ComplexEmbeddingTable":
        return ComplexEmbeddingTable(
            self.vocab, self.d, self.d1, *(getattr(self, n).copy() for n in self.PARAM_NAMES), self.seed, dict(self.meta)
        )

    def entity_vec(self, entity: EntityId) -> np.ndarray:
        return self.entity[self.vocab.row(entity)].astype(np.complex128)

    def time_vec(self, bin) -> np.ndarray:
        return self.time[self._bin_index(bin)].astype(np.complex128)

    def _bin_index(self, bin) -> int:
        if isinstance(bin, TimeBin):
            return flatten_timebin(bin, self.vocab.bins_per_day)
        idx = int(bin)
        if not 0 <= idx < self.vocab.n_bins:
            raise KeyError(bin)
        return idx

    def poi_rows(self) -> np.ndarray:
        start = self.vocab.offset(EntityKind.POI)
        return np.arange(start, start + self.vocab.size(EntityKind.POI))

    def category_rows(self, level: int) -> np.ndarray:
        kind = EntityKind.category(level)
        start = self.vocab.offset(kind)
        return np.arange(start, start + self.vocab.size(kind))

    def all_finite(self) -> bool:
        return all(np.isfinite(getattr(self, n)).all() for n in self.PARAM_NAMES)


def init_table(
    vocab: EntityVocab, d: int = 100, alpha: float = 0.5, seed: int = 0, init_scale: float = 0.1, precision: int = 64
) -> ComplexEmbeddingTable:
    """I.i.d. Gaussian(0, init_scale^2) real and imaginary parts, deterministic in ``seed``."""
    if d < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {d}")
    if precision not in DTYPES:
        raise ConfigError(f"precision must be 32 or 64, got {precision}")
    d1 = d1_for(alpha, d)
    rng = np.random.default_rng(seed)
    shapes = [(vocab.n_entity_rows, d), (vocab.n_bins, d1), (1, d), (len(Relation), d)]
    arrays = []
    for shape in shapes:
        re = rng.standard_normal(shape) * init_scale
        im = rng.standard_normal(shape) * init_scale
        arrays.append((re + 1j * im).astype(DTYPES[precision]))
    return ComplexEmbeddingTable(vocab, d, d1, *arrays, seed=seed)


def _check_alpha(table: ComplexEmbeddingTable, alpha) -> None:
    if alpha is not None and d1_for(alpha, table.d) != table.d1:
        raise ValueError(f"alpha={alpha} implies d1={d1_for(alpha, table.d)} but the table has d1={table.d1}")


def aux_embedding(aux, table: ComplexEmbeddingTable) -> np.ndarray:
    """Element-wise product of the auxiliary entities' embeddings (all ones when empty)."""
    out = np.ones(table.d, dtype=np.complex128)
    for entity in aux:
        out = out * table.entity_vec(entity)
    return out


def relation_embedding(bin, aux, table: ComplexEmbeddingTable, alpha=None) -> np.ndarray:
    _check_alpha(table, alpha)
    rel = table.rel_v[0].astype(np.complex128)
    modulated = np.concatenate([rel[: table.d1] * np.conj(table.time_vec(bin)), rel[table.d1 :]])
    return modulated * aux_embedding(aux, table)


def _real_dot(x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Re(sum x * conj(p)) along the last axis."""
    return (x.real * p.real + x.imag * p.imag).sum(axis=-1)


def score_stmpr(user: EntityId, poi: EntityId, bin, aux, table: ComplexEmbeddingTable, alpha=None) -> float:
    x = table.entity_vec(user) * relation_embedding(bin, aux, table, alpha)
    return float(_real_dot(x, table.entity_vec(poi)))


def score_affiliation(subject: EntityId, obj: EntityId, relation, table: ComplexEmbeddingTable) -> float:
    rel = relation if isinstance(relation, Relation) else Relation(int(relation))
    x = table.entity_vec(subject) * table.rel_c[rel.row].astype(np.complex128)
    return float(_real_dot(x, table.entity_vec(obj)))


def score_stmpr_batch(
    user: EntityId, bin, aux, candidates, table: ComplexEmbeddingTable, alpha=None, strict: bool = True
) -> np.ndarray:
    """Scores of one (user, bin, aux) context against many candidate PoIs.

    In strict mode every entry is bitwise equal to the corresponding
    ``score_stmpr`` call; otherwise a matrix product is used.
    """
    x = table.entity_vec(user) * relation_embedding(bin, aux, table, alpha)
    rows = np.array([table.vocab.row(c) for c in candidates], dtype=np.int64)
    return score_rows(x[None, :], table.entity[rows], strict=strict)[0]


def query_vectors(table: ComplexEmbeddingTable, user_rows, bin_idx, aux_rows) -> np.ndarray:
    """u * r(t, A) for many contexts; ``aux_rows`` uses -1 for an empty aux set."""
    user_rows = np.asarray(user_rows, dtype=np.int64)
    bin_idx = np.asarray(bin_idx, dtype=np.int64)
    aux_rows = np.asarray(aux_rows, dtype=np.int64)
    rel = table.rel_v[0].astype(np.complex128)
    m = np.empty((len(user_rows), table.d), dtype=np.complex128)
    m[:, : table.d1] = rel[: table.d1] * np.conj(table.time[bin_idx].astype(np.complex128))
    m[:, table.d1 :] = rel[table.d1 :]
    has_aux = aux_rows >= 0
    if has_aux.any():
        a = np.ones_like(m)
        a[has_aux] = table.entity[aux_rows[has_aux]]
        m = m * a
    return table.entity[user_rows].astype(np.complex128) * m


def score_rows(x: np.ndarray, cand: np.ndarray, strict: bool = False) -> np.ndarray:
    """(Q, d) contexts against (P, d) candidates -> (Q, P) real scores in float64."""
    cand = cand.astype(np.complex128, copy=False)
    if strict:
        out = np.empty((x.shape[0], cand.shape[0]))
        for q in range(x.shape[0]):
            out[q] = _real_dot(x[q][None, :], cand)
        return out
    return x.real @ cand.real.T + x.imag @ cand.imag.T


# -- checkpoint format -------------------------------------------------------


def _header(table: ComplexEmbeddingTable) -> dict:
    vocab = table.vocab
    arrays = [[f"entity.{k.value}", [vocab.size(k), table.d]] for k in ENTITY_ROW_ORDER]
    arrays += [["time", list(table.time.shape)], ["rel_v", list(table.rel_v.shape)], ["rel_c", list(table.rel_c.shape)]]
    return {
        "format_version": FORMAT_VERSION,
        "d": table.d,
        "d1": table.d1,
        "precision": table.precision,
        "seed": table.seed,
        "byte_order": "little",
        "layout": "interleaved re,im per dimension",
        "sizes": {k.value: vocab.size(k) for k in ENTITY_ROW_ORDER + (EntityKind.TIMEBIN,)},
        "vocab": vocab.to_dict(),
        "arrays": arrays,
        "meta": table.meta,
    }


def save_checkpoint(table: ComplexEmbeddingTable, path) -> str:
    """Write the binary checkpoint and a JSON manifest next to it; returns the payload sha256."""
    header = _header(table)
    head_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    dtype = np.dtype(DTYPES[table.precision]).newbyteorder("<")
    body = b"".join(
        np.ascontiguousarray(getattr(table, n), dtype=dtype).tobytes() for n in ComplexEmbeddingTable.PARAM_NAMES
    )
    blob = MAGIC + struct.pack("<Q", len(head_bytes)) + head_bytes + body
    with open(path, "wb") as fh:
        fh.write(blob)
    digest = hashlib.sha256(blob).hexdigest()
    manifest = dict(header, sha256=digest, alpha=table.alpha, payload_bytes=len(body))
    manifest["vocab"] = {k: (len(v) if isinstance(v, list) else v) for k, v in header["vocab"].items()}
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return digest


def load_checkpoint(path) -> ComplexEmbeddingTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not an embedding checkpoint")
    (n_head,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(blob[start : start + n_head].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    vocab = EntityVocab.from_dict(header["vocab"])
    d, d1 = header["d"], header["d1"]
    dtype = np.dtype(DTYPES[header["precision"]]).newbyteorder("<")
    offset = start + n_head
    shapes = [(vocab.n_entity_rows, d), (vocab.n_bins, d1), (1, d), (len(Relation), d)]
    if offset + sum(a * b for a, b in shapes) * dtype.itemsize != len(blob):
        raise DataError(f"{path}: trailing or missing bytes in checkpoint payload")
    arrays = []
    for shape in shapes:
        count = shape[0] * shape[1]
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        arrays.append(arr.astype(DTYPES[header["precision"]]))
        offset += count * dtype.itemsize
    return ComplexEmbeddingTable(vocab, d, d1, *arrays, seed=header["seed"], meta=header.get("meta", {}))
