"""Losses, gradients, negative sampling and the mini-batch training driver.

Gradients are written by hand. For a real loss L of a complex parameter z the
stored gradient is dL/dRe(z) + i dL/dIm(z); with that convention
L = Re(sum z * c) has gradient conj(c), which makes every chain-rule step a
conjugate multiply.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import embedding as emb
from .core import EntityKind, Relation, Stkg, Variant, parse_graph_parts
from .errors import ConfigError, TrainingError

logger = logging.getLogger(__name__)

BETA_PRESETS = {"beijing": 20.0, "shanghai": 5.0, "foursquare": 10.0}


@dataclass(frozen=True)
class TrainConfig:
    d: int = 100
    alpha: float = 0.5
    beta: float = 20.0
    learning_rate: float = 0.02
    n_neg: int = 50
    n_epoch: int = 30
    batch_size: int = 512
    emb_reg: float = 0.01
    time_reg: float = 0.01
    emb_reg_form: str = "n3"  # n3 | l2
    time_reg_form: str = "smooth"  # smooth | l2
    noise: str = "uniform"  # uniform | unigram
    noise_power: float = 0.75
    loss_mode: str = "ns"  # ns | full
    optimizer: str = "adam"  # adam | sgd
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_scale: float = 0.1
    precision: int = 64
    seed: int = 0
    stmpr_variant: str = "V0"
    graph_parts: str = "V"
    batch_mode: str = "mixed"  # mixed | homogeneous
    patience: int = 0  # 0 disables early stopping
    strict: bool = True
    threads: int = 0  # 0 leaves the BLAS default

    def __post_init__(self):
        for name in ("beta", "learning_rate", "emb_reg", "time_reg", "init_scale", "noise_power"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.d < 1 or self.batch_size < 1 or self.n_neg < 0 or self.n_epoch < 0:
            raise ConfigError("d and batch_size must be >= 1; n_neg and n_epoch >= 0")
        choices = {
            "emb_reg_form": ("n3", "l2"),
            "time_reg_form": ("smooth", "l2"),
            "noise": ("uniform", "unigram"),
            "loss_mode": ("ns", "full"),
            "optimizer": ("adam", "sgd"),
            "batch_mode": ("mixed", "homogeneous"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.precision not in (32, 64):
            raise ConfigError("precision must be 32 or 64")
        object.__setattr__(self, "stmpr_variant", Variant.parse(self.stmpr_variant).name)
        object.__setattr__(self, "graph_parts", ",".join(sorted(parse_graph_parts(self.graph_parts))))

    @property
    def variant(self) -> Variant:
        return Variant[self.stmpr_variant]

    @property
    def parts(self) -> frozenset:
        return parse_graph_parts(self.graph_parts)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            key = key.replace("-", "_")
            if key == "beta" and isinstance(value, str) and value.lower() in BETA_PRESETS:
                value = BETA_PRESETS[value.lower()]
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(known[key], value)
        return cls(**kwargs)


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    kind = type(f.default)
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                raise ValueError(text)
            return text.lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {f.name}: {value!r}") from None
    return text


def read_config_file(path) -> dict:
    """Flat ``key = value`` file with ``#`` comments."""
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        parser.read_string("[config]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return dict(parser["config"])


def write_config_file(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in config.to_dict().items():
            fh.write(f"{key} = {value}\n")


# -- gradient accumulation ---------------------------------------------------


class SparseGrads:
    """Row-sparse complex gradients per parameter table."""

    def __init__(self):
        self._parts = {}

    def add(self, name: str, rows, values) -> None:
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.complex128)
        values = values.reshape(len(rows), -1)
        if len(rows):
            self._parts.setdefault(name, []).append((rows, values))

    def finalize(self) -> dict:
        out = {}
        for name, parts in self._parts.items():
            rows = np.concatenate([r for r, _ in parts])
            values = np.concatenate([v for _, v in parts])
            uniq, inverse = np.unique(rows, return_inverse=True)
            width = values.shape[1]
            flat = (inverse[:, None] * width + np.arange(width)).ravel()
            size = len(uniq) * width
            re = np.bincount(flat, weights=values.real.ravel(), minlength=size)
            im = np.bincount(flat, weights=values.imag.ravel(), minlength=size)
            out[name] = (uniq, (re + 1j * im).reshape(len(uniq), width))
        return out


def dense_grads(grads: dict, table: emb.ComplexEmbeddingTable) -> dict:
    out = {name: np.zeros(arr.shape, dtype=np.complex128) for name, arr in table.params().items()}
    for name, (rows, values) in grads.items():
        out[name][rows] += values
    return out


# -- mobility-fact losses ----------------------------------------------------


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


class _Context:
    """Forward pass of u * r(t, A) for a batch, kept for the backward pass."""

    def __init__(self, table, users, bins, aux):
        self.table = table
        self.users = np.asarray(users, dtype=np.int64)
        self.bins = np.asarray(bins, dtype=np.int64)
        self.aux = np.asarray(aux, dtype=np.int64)
        d1 = table.d1
        self.u = table.entity[self.users].astype(np.complex128, copy=False)
        self.t = table.time[self.bins].astype(np.complex128, copy=False)
        self.rel = table.rel_v[0].astype(np.complex128, copy=False)
        self.m = np.empty_like(self.u)
        self.m[:, :d1] = self.rel[:d1] * np.conj(self.t)
        self.m[:, d1:] = self.rel[d1:]
        self.a = np.ones_like(self.u)
        self.has_aux = self.aux >= 0
        self.a[self.has_aux] = table.entity[self.aux[self.has_aux]]
        self.x = self.u * self.m * self.a

    def backward(self, grad_x: np.ndarray, grads: SparseGrads) -> None:
        d1 = self.table.d1
        grads.add("entity", self.users, grad_x * np.conj(self.m * self.a))
        g_ma = grad_x * np.conj(self.u)
        if self.has_aux.any():
            g_a = g_ma * np.conj(self.m)
            grads.add("entity", self.aux[self.has_aux], g_a[self.has_aux])
        g_m = g_ma * np.conj(self.a)
        g_rel = np.concatenate([g_m[:, :d1] * self.t, g_m[:, d1:]], axis=1).sum(axis=0)
        grads.add("rel_v", [0], g_rel[None, :])
        if d1:
            grads.add("time", self.bins, self.rel[:d1] * np.conj(g_m[:, :d1]))


def stmpr_ns_loss(table, users, pois, bins, aux, negatives, grads: SparseGrads | None = None) -> np.ndarray:
    """Per-fact -log sigmoid(f_pos) - sum_j log sigmoid(-f_neg_j); ``negatives`` are entity rows (B, N)."""
    ctx = _Context(table, users, bins, aux)
    pois = np.asarray(pois, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64).reshape(len(pois), -1)
    p = table.entity[pois].astype(np.complex128, copy=False)
    f_pos = emb._real_dot(ctx.x, p)
    loss = _softplus(-f_pos)
    g_pos = -_sigmoid(-f_pos)
    grad_x = g_pos[:, None] * p
    if negatives.shape[1]:
        q = table.entity[negatives].astype(np.complex128, copy=False)
        f_neg = np.matmul(q, np.conj(ctx.x)[:, :, None])[:, :, 0].real
        loss = loss + _softplus(f_neg).sum(axis=1)
        g_neg = _sigmoid(f_neg)
        grad_x = grad_x + np.matmul(g_neg[:, None, :].astype(np.complex128), q)[:, 0, :]
        if grads is not None:
            # sum_b g[b, j] * x[b] per distinct negative row, as a sparse (rows x batch) product
            uniq, inverse = np.unique(negatives.ravel(), return_inverse=True)
            owner = np.repeat(np.arange(len(pois)), negatives.shape[1])
            weights = sparse.csr_matrix((g_neg.ravel(), (inverse, owner)), shape=(len(uniq), len(pois)))
            grads.add("entity", uniq, weights @ ctx.x)
    if grads is not None:
        grads.add("entity", pois, g_pos[:, None] * ctx.x)
        ctx.backward(grad_x, grads)
    return loss


def _softmax_xent(x, cand, target_col, grads, cand_rows, name="entity"):
    """Cross entropy of the target among candidates; returns (loss, grad wrt x)."""
    scores = x.real @ cand.real.T + x.imag @ cand.imag.T
    top = scores.max(axis=1, keepdims=True)
    shifted = scores - top
    log_z = np.log(np.exp(shifted).sum(axis=1))
    idx = np.arange(len(x))
    loss = log_z - shifted[idx, target_col]
    if grads is None:
        return loss, None
    g = np.exp(shifted - log_z[:, None])
    g[idx, target_col] -= 1.0
    grads.add(name, cand_rows, g.T @ x)
    return loss, g @ cand


def stmpr_full_loss(table, users, pois, bins, aux, grads: SparseGrads | None = None) -> np.ndarray:
    """Per-fact softmax cross entropy over every PoI."""
    ctx = _Context(table, users, bins, aux)
    cand_rows = table.poi_rows()
    cand = table.entity[cand_rows].astype(np.complex128, copy=False)
    target = np.asarray(pois, dtype=np.int64) - cand_rows[0]
    loss, grad_x = _softmax_xent(ctx.x, cand, target, grads, cand_rows)
    if grads is not None:
        ctx.backward(grad_x, grads)
    return loss


def affiliation_candidate_level(table, relation_rows, objects) -> np.ndarray:
    """Category level whose members compete as objects of each fact."""
    level = np.asarray(relation_rows, dtype=np.int64) + 1
    cc = level == Relation.CAT_CAT.value
    if cc.any():
        obj = np.asarray(objects, dtype=np.int64)[cc]
        obj_level = np.zeros(len(obj), dtype=np.int64)
        for lvl in (1, 2, 3):
            rows = table.category_rows(lvl)
            if len(rows):
                obj_level[(obj >= rows[0]) & (obj <= rows[-1])] = lvl
        level[cc] = obj_level
    return level


def affiliation_loss(table, subjects, relation_rows, objects, grads: SparseGrads | None = None, weight=1.0):
    """Per-fact softmax cross entropy of the object among all categories of its level."""
    subjects = np.asarray(subjects, dtype=np.int64)
    relation_rows = np.asarray(relation_rows, dtype=np.int64)
    objects = np.asarray(objects, dtype=np.int64)
    loss = np.zeros(len(subjects))
    levels = affiliation_candidate_level(table, relation_rows, objects)
    for lvl in (1, 2, 3):
        sel = np.flatnonzero(levels == lvl)
        if not len(sel):
            continue
        cand_rows = table.category_rows(lvl)
        cand = table.entity[cand_rows].astype(np.complex128, copy=False)
        s = table.entity[subjects[sel]].astype(np.complex128, copy=False)
        r = table.rel_c[relation_rows[sel]].astype(np.complex128, copy=False)
        x = s * r
        sub = _Sub(grads, weight) if grads is not None else None
        loss_sel, grad_x = _softmax_xent(x, cand, objects[sel] - cand_rows[0], sub, cand_rows)
        loss[sel] = loss_sel
        if grads is not None:
            grad_x = grad_x * weight
            grads.add("entity", subjects[sel], grad_x * np.conj(r))
            grads.add("rel_c", relation_rows[sel], grad_x * np.conj(s))
    return loss


class _Sub:
    """Scales gradients before forwarding them to a SparseGrads."""

    def __init__(self, grads, weight):
        self.grads, self.weight = grads, weight

    def add(self, name, rows, values):
        self.grads.add(name, rows, np.asarray(values) * self.weight)


# -- regularizers ------------------------------------------------------------


def embedding_regularizer(table, rows, coeff, form="n3", grads: SparseGrads | None = None) -> float:
    """coeff * sum over listed rows (with repetition) of sum_i |z_i|^3 (n3) or |z_i|^2 (l2)."""
    rows = np.asarray(rows, dtype=np.int64)
    if coeff == 0 or not len(rows):
        return 0.0
    z = table.entity[rows].astype(np.complex128, copy=False)
    mod = np.abs(z)
    if form == "n3":
        value = coeff * float((mod**3).sum())
        g = 3.0 * coeff * mod * z
    else:
        value = coeff * float((mod**2).sum())
        g = 2.0 * coeff * z
    if grads is not None:
        grads.add("entity", rows, g)
    return value


def time_regularizer(table, bins, coeff, form="smooth", grads: SparseGrads | None = None) -> float:
    """Smooth: coeff * sum over listed bins of |t_k - t_{k+1}|^2 within the same day type."""
    bins = np.asarray(bins, dtype=np.int64)
    if coeff == 0 or table.d1 == 0 or not len(bins):
        return 0.0
    t = table.time.astype(np.complex128, copy=False)
    if form == "l2":
        z = t[bins]
        if grads is not None:
            grads.add("time", bins, 2.0 * coeff * z)
        return coeff * float((np.abs(z) ** 2).sum())
    per_day = table.vocab.bins_per_day
    first = bins[(bins % per_day) < per_day - 1]
    if not len(first):
        return 0.0
    diff = t[first] - t[first + 1]
    if grads is not None:
        grads.add("time", first, 2.0 * coeff * diff)
        grads.add("time", first + 1, -2.0 * coeff * diff)
    return coeff * float((np.abs(diff) ** 2).sum())


# -- negative sampling -------------------------------------------------------


class NoiseDistribution:
    """Distribution over PoI indices 0..n-1 used to draw negatives."""

    def __init__(self, n: int, probs: np.ndarray | None = None):
        self.n = n
        self.probs = probs

    @classmethod
    def uniform(cls, n: int) -> "NoiseDistribution":
        return cls(n)

    @classmethod
    def unigram(cls, counts, power: float = 0.75) -> "NoiseDistribution":
        weights = (np.asarray(counts, dtype=np.float64) + 1.0) ** power
        return cls(len(weights), weights / weights.sum())

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.probs is None:
            return rng.integers(0, self.n, size=size)
        return rng.choice(self.n, size=size, p=self.probs)

    def draw_excluding(self, rng: np.random.Generator, excluded: np.ndarray) -> np.ndarray:
        """One draw per entry from the distribution renormalized without ``excluded``."""
        if self.probs is None:
            out = rng.integers(0, self.n - 1, size=len(excluded))
            return out + (out >= excluded)
        out = np.empty(len(excluded), dtype=np.int64)
        for i, ex in enumerate(excluded):
            p = self.probs.copy()
            p[ex] = 0.0
            out[i] = rng.choice(self.n, p=p / p.sum())
        return out


def sample_negative_batch(positives, noise: NoiseDistribution, n_neg: int, rng, max_retries: int = 8) -> np.ndarray:
    """(B, n_neg) PoI indices; draws equal to the row's positive are redrawn."""
    positives = np.asarray(positives, dtype=np.int64)
    if noise.n < 2:
        raise ConfigError("negative sampling needs at least two PoIs")
    draws = noise.draw(rng, (len(positives), n_neg)).astype(np.int64)
    for _ in range(max_retries):
        clash = draws == positives[:, None]
        if not clash.any():
            return draws
        draws[clash] = noise.draw(rng, int(clash.sum()))
    clash = draws == positives[:, None]
    if clash.any():
        rows = np.nonzero(clash)[0]
        draws[clash] = noise.draw_excluding(rng, positives[rows])
    return draws


def sample_negatives(positive: int, noise: NoiseDistribution, n_neg: int, rng) -> list:
    if n_neg == 0:
        if noise.n < 2:
            raise ConfigError("negative sampling needs at least two PoIs")
        return []
    return sample_negative_batch([positive], noise, n_neg, rng)[0].tolist()


# -- batch loss --------------------------------------------------------------


@dataclass
class Batch:
    """Facts of one mini-batch as entity-row arrays; ``negatives`` holds entity rows."""

    users: np.ndarray
    pois: np.ndarray
    bins: np.ndarray
    aux: np.ndarray
    negatives: np.ndarray | None = None
    aff_subject: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    aff_relation: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    aff_object: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


@dataclass
class LossParts:
    total: float = 0.0
    v: float = 0.0
    c: dict = field(default_factory=lambda: {"C1": 0.0, "C2": 0.0, "C3": 0.0, "CC": 0.0})
    reg_emb: float = 0.0
    reg_time: float = 0.0
    per_fact_v: np.ndarray | None = None
    per_fact_c: np.ndarray | None = None

    @property
    def c_total(self) -> float:
        return sum(self.c.values())


def total_loss(batch: Batch, table, config: TrainConfig, grads: SparseGrads | None = None) -> LossParts:
    """L_V + beta * sum_i L_Ci + regularizers over one batch (sums, not means)."""
    parts = LossParts()
    if len(batch.users):
        if config.loss_mode == "full":
            per = stmpr_full_loss(table, batch.users, batch.pois, batch.bins, batch.aux, grads)
        else:
            negs = batch.negatives if batch.negatives is not None else np.zeros((len(batch.users), 0), np.int64)
            per = stmpr_ns_loss(table, batch.users, batch.pois, batch.bins, batch.aux, negs, grads)
        parts.per_fact_v = per
        parts.v = float(per.sum())
        rows = np.concatenate([batch.users, batch.pois, batch.aux[batch.aux >= 0]])
        parts.reg_emb += embedding_regularizer(table, rows, config.emb_reg, config.emb_reg_form, grads)
        parts.reg_time += time_regularizer(table, batch.bins, config.time_reg, config.time_reg_form, grads)
    if len(batch.aff_subject):
        per = affiliation_loss(table, batch.aff_subject, batch.aff_relation, batch.aff_object, grads, config.beta)
        parts.per_fact_c = per
        for rel in Relation:
            key = "CC" if rel is Relation.CAT_CAT else rel.name
            parts.c[key] = float(per[batch.aff_relation == rel.row].sum())
        rows = np.concatenate([batch.aff_subject, batch.aff_object])
        parts.reg_emb += embedding_regularizer(table, rows, config.emb_reg, config.emb_reg_form, grads)
    parts.total = parts.v + config.beta * parts.c_total + parts.reg_emb + parts.reg_time
    return parts


# -- optimizers --------------------------------------------------------------


class LazyAdam:
    """Adam whose moments and parameters are only touched for rows with gradients."""

    def __init__(self, table, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step = 0
        self.m = {n: np.zeros(a.shape + (2,)) for n, a in table.params().items()}
        self.v = {n: np.zeros(a.shape + (2,)) for n, a in table.params().items()}

    def apply(self, table, grads: dict) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1**self.step
        c2 = 1.0 - self.beta2**self.step
        for name, (rows, g) in grads.items():
            param = getattr(table, name)
            g = np.stack([g.real, g.imag], axis=-1)
            m = self.beta1 * self.m[name][rows] + (1.0 - self.beta1) * g
            v = self.beta2 * self.v[name][rows] + (1.0 - self.beta2) * g * g
            self.m[name][rows] = m
            self.v[name][rows] = v
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            param[rows] = param[rows] - (step[..., 0] + 1j * step[..., 1]).astype(param.dtype)


class SGD:
    def __init__(self, table, lr):
        self.lr = lr

    def apply(self, table, grads: dict) -> None:
        for name, (rows, g) in grads.items():
            param = getattr(table, name)
            param[rows] = param[rows] - (self.lr * g).astype(param.dtype)


def make_optimizer(table, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(table, config.learning_rate)
    return LazyAdam(table, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)


def _describe_fact(table, batch: Batch, parts: LossParts) -> str:
    vocab = table.vocab
    if parts.per_fact_v is not None:
        bad = np.flatnonzero(~np.isfinite(parts.per_fact_v))
        if len(bad):
            i = bad[0]
            u = vocab.external_of(vocab.entity_of_row(int(batch.users[i])))
            p = vocab.external_of(vocab.entity_of_row(int(batch.pois[i])))
            return f"mobility fact (user={u}, poi={p}, bin={int(batch.bins[i])})"
    if parts.per_fact_c is not None:
        bad = np.flatnonzero(~np.isfinite(parts.per_fact_c))
        if len(bad):
            i = bad[0]
            s = vocab.external_of(vocab.entity_of_row(int(batch.aff_subject[i])))
            o = vocab.external_of(vocab.entity_of_row(int(batch.aff_object[i])))
            return f"affiliation fact ({s}, {Relation(int(batch.aff_relation[i]) + 1).name}, {o})"
    return "a regularization term"


def grad_step(batch: Batch, table, config: TrainConfig, optimizer) -> LossParts:
    """One optimizer update from the batch's summed loss. Only touched rows change."""
    grads = SparseGrads()
    parts = total_loss(batch, table, config, grads)
    final = grads.finalize()
    if not np.isfinite(parts.total) or not all(np.isfinite(g).all() for _, g in final.values()):
        raise TrainingError(f"non-finite loss or gradient; offending {_describe_fact(table, batch, parts)}")
    optimizer.apply(table, final)
    return parts


# -- driver ------------------------------------------------------------------


@dataclass
class TrainReport:
    loss: list = field(default_factory=list)
    loss_v: list = field(default_factory=list)
    loss_c: dict = field(default_factory=lambda: {"C1": [], "C2": [], "C3": [], "CC": []})
    loss_reg: list = field(default_factory=list)
    valid_mrr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def epochs(self) -> int:
        return len(self.loss)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _select_graph(stkg: Stkg, config: TrainConfig) -> Stkg:
    if stkg.variant is not config.variant:
        raise ConfigError(f"graph was built with variant {stkg.variant.name} but config asks for {config.stmpr_variant}")
    parts = config.parts
    if "CC" in parts and stkg.cat_affiliation_facts is None:
        raise ConfigError("config requests category affiliation facts (CC) but the graph has none")
    return Stkg(stkg.stmpr_facts, stkg.affiliation_facts, stkg.cat_affiliation_facts, stkg.vocab, stkg.variant, parts)


def _batches(n_v: int, n_a: int, config: TrainConfig, rng) -> list:
    size = config.batch_size
    if config.batch_mode == "homogeneous":
        out = []
        for offset, n in ((0, n_v), (n_v, n_a)):
            perm = rng.permutation(n) + offset
            out.extend(perm[i : i + size] for i in range(0, n, size))
        order = rng.permutation(len(out))
        return [out[i] for i in order]
    perm = rng.permutation(n_v + n_a)
    return [perm[i : i + size] for i in range(0, n_v + n_a, size)]


class _ThreadLimit:
    def __init__(self, config: TrainConfig):
        self.limit = 1 if config.strict else (config.threads or None)
        self._ctx = None

    def __enter__(self):
        if self.limit:
            try:
                from threadpoolctl import threadpool_limits
            except ImportError:  # pragma: no cover
                return self
            self._ctx = threadpool_limits(limits=self.limit)
        return self

    def __exit__(self, *exc):
        if self._ctx is not None:
            self._ctx.unregister()
        return False


def train(stkg: Stkg, split, config: TrainConfig, *, catalog=None, valid_queries=None, table=None, log_every=1):
    """Run ``n_epoch`` epochs of shuffled mini-batches; keep the best-validation-MRR table.

    Returns ``(table, report)``.
    """
    from .evaluation import build_queries, evaluate

    graph = _select_graph(stkg, config)
    arrays = graph.arrays()
    n_v, n_a = arrays.n_stmpr, arrays.n_affiliation
    if n_v + n_a == 0:
        raise ConfigError("empty training set")
    vocab = graph.vocab
    n_pois = vocab.size(EntityKind.POI)
    poi_offset = vocab.offset(EntityKind.POI)
    if config.loss_mode == "ns" and config.n_neg and n_pois < 2:
        raise ConfigError("negative sampling needs at least two PoIs")
    if table is None:
        table = emb.init_table(vocab, config.d, config.alpha, config.seed, config.init_scale, config.precision)
    table.meta.update({"variant": config.stmpr_variant, "graph_parts": config.graph_parts, "alpha": config.alpha})
    if config.noise == "unigram":
        noise = NoiseDistribution.unigram(np.bincount(arrays.poi - poi_offset, minlength=n_pois), config.noise_power)
    else:
        noise = NoiseDistribution.uniform(n_pois)
    if valid_queries is None and split is not None:
        valid_queries = build_queries(split, vocab, config.variant, catalog, partition="valid")
    rng = np.random.default_rng([config.seed, 1])
    optimizer = make_optimizer(table, config)
    report = TrainReport()
    best, best_mrr, stale = None, -np.inf, 0
    empty = np.zeros(0, dtype=np.int64)
    with _ThreadLimit(config):
        for epoch in range(config.n_epoch):
            start = time.perf_counter()
            sums = LossParts()
            for idx in _batches(n_v, n_a, config, rng):
                iv = idx[idx < n_v]
                ia = idx[idx >= n_v] - n_v
                negs = None
                if config.loss_mode == "ns" and len(iv):
                    local = sample_negative_batch(arrays.poi[iv] - poi_offset, noise, config.n_neg, rng)
                    negs = local + poi_offset
                batch = Batch(
                    arrays.user[iv],
                    arrays.poi[iv],
                    arrays.bin[iv],
                    arrays.aux[iv],
                    negs,
                    arrays.aff_subject[ia] if n_a else empty,
                    arrays.aff_relation[ia] if n_a else empty,
                    arrays.aff_object[ia] if n_a else empty,
                )
                parts = grad_step(batch, table, config, optimizer)
                sums.total += parts.total
                sums.v += parts.v
                for k in sums.c:
                    sums.c[k] += parts.c[k]
                sums.reg_emb += parts.reg_emb
                sums.reg_time += parts.reg_time
            mrr = float("nan")
            if valid_queries:
                mrr = evaluate(valid_queries, table).mrr
            report.loss.append(sums.total)
            report.loss_v.append(sums.v)
            for k in sums.c:
                report.loss_c[k].append(sums.c[k])
            report.loss_reg.append(sums.reg_emb + sums.reg_time)
            report.valid_mrr.append(mrr)
            report.seconds.append(time.perf_counter() - start)
            if log_every and (epoch + 1) % log_every == 0:
                logger.info("epoch %d loss %.4f L_V %.4f valid MRR %.4f", epoch + 1, sums.total, sums.v, mrr)
            if valid_queries:
                if mrr > best_mrr:
                    best, best_mrr, stale, report.best_epoch = table.copy(), mrr, 0, epoch
                else:
                    stale += 1
                    if config.patience and stale >= config.patience:
                        break
    if best is None:
        best = table
        report.best_epoch = report.epochs - 1
    return best, report
