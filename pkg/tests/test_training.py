import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import check_gradient, random_table, small_vocab
from stkg.core import EntityId, EntityKind, Relation
from stkg.embedding import init_table, score_affiliation, score_stmpr
from stkg.errors import ConfigError, TrainingError
from stkg.ingest import Catalog, IngestConfig, build_dataset, rebuild_for_variant
from stkg.synthgen import SynthSpec, generate
from stkg.training import (
    BETA_PRESETS,
    Batch,
    LazyAdam,
    NoiseDistribution,
    SparseGrads,
    TrainConfig,
    affiliation_loss,
    embedding_regularizer,
    grad_step,
    read_config_file,
    sample_negative_batch,
    sample_negatives,
    stmpr_full_loss,
    stmpr_ns_loss,
    time_regularizer,
    total_loss,
    train,
    write_config_file,
)


def poi_row(vocab, i):
    return vocab.row(EntityId(EntityKind.POI, i))


def user_row(vocab, i):
    return vocab.row(EntityId(EntityKind.USER, i))


def cat_row(vocab, level, i):
    return vocab.row(EntityId(EntityKind.category(level), i))


def mixed_batch(vocab, with_negatives=True):
    users = np.array([user_row(vocab, 0), user_row(vocab, 1), user_row(vocab, 0)])
    pois = np.array([poi_row(vocab, 1), poi_row(vocab, 2), poi_row(vocab, 1)])
    bins = np.array([0, 3, 6])
    aux = np.array([poi_row(vocab, 0), -1, poi_row(vocab, 1)])
    negs = np.array([[poi_row(vocab, 3), poi_row(vocab, 4)], [poi_row(vocab, 0), poi_row(vocab, 0)], [poi_row(vocab, 2), poi_row(vocab, 4)]])
    return Batch(
        users,
        pois,
        bins,
        aux,
        negs if with_negatives else None,
        aff_subject=np.array([poi_row(vocab, 0), poi_row(vocab, 2), cat_row(vocab, 1, 0)]),
        aff_relation=np.array([Relation.C1.row, Relation.C3.row, Relation.CAT_CAT.row]),
        aff_object=np.array([cat_row(vocab, 1, 2), cat_row(vocab, 3, 1), cat_row(vocab, 2, 1)]),
    )


class TestGradients:
    @pytest.fixture
    def table(self):
        vocab = small_vocab(n_pois=5, n_cat=(3, 2, 2))
        return random_table(vocab, d=4, alpha=0.5, seed=2, scale=0.7)

    def test_ns_loss(self, table):
        b = mixed_batch(table.vocab)
        f = lambda t, g: float(stmpr_ns_loss(t, b.users, b.pois, b.bins, b.aux, b.negatives, g).sum())
        assert check_gradient(f, table) < 1e-4

    def test_full_loss(self, table):
        b = mixed_batch(table.vocab)
        f = lambda t, g: float(stmpr_full_loss(t, b.users, b.pois, b.bins, b.aux, g).sum())
        assert check_gradient(f, table) < 1e-4

    def test_affiliation_loss(self, table):
        b = mixed_batch(table.vocab)
        f = lambda t, g: float(affiliation_loss(t, b.aff_subject, b.aff_relation, b.aff_object, g, weight=3.0).sum() * 3.0)
        assert check_gradient(f, table) < 1e-4

    @pytest.mark.parametrize("form", ["n3", "l2"])
    def test_embedding_regularizer(self, table, form):
        rows = np.array([1, 4, 4, 7])
        f = lambda t, g: embedding_regularizer(t, rows, 0.3, form, g)
        assert check_gradient(f, table) < 1e-4

    @pytest.mark.parametrize("form", ["smooth", "l2"])
    def test_time_regularizer(self, table, form):
        bins = np.array([0, 2, 3, 5, 5])
        f = lambda t, g: time_regularizer(t, bins, 0.3, form, g)
        assert check_gradient(f, table) < 1e-4

    @pytest.mark.parametrize("mode", ["ns", "full"])
    def test_total_loss(self, table, mode):
        b = mixed_batch(table.vocab)
        cfg = TrainConfig(beta=2.5, emb_reg=0.05, time_reg=0.05, loss_mode=mode)
        f = lambda t, g: total_loss(b, t, cfg, g).total
        assert check_gradient(f, table) < 1e-4

    def test_alpha_extremes(self):
        vocab = small_vocab()
        for alpha in (0.0, 1.0):
            t = random_table(vocab, d=4, alpha=alpha, seed=5, scale=0.6)
            b = mixed_batch(vocab)
            f = lambda t, g: total_loss(b, t, TrainConfig(alpha=alpha), g).total
            assert check_gradient(f, t) < 1e-4


class TestLossValues:
    def test_single_poi_full_softmax_is_zero(self):
        vocab = small_vocab(n_pois=1)
        t = random_table(vocab)
        loss = stmpr_full_loss(t, [user_row(vocab, 0)], [poi_row(vocab, 0)], [1], [-1])
        assert loss[0] == 0.0

    def test_equal_scores_log_p(self):
        vocab = small_vocab(n_pois=7)
        t = init_table(vocab, d=4, init_scale=0.0)
        loss = stmpr_full_loss(t, [user_row(vocab, 0)], [poi_row(vocab, 3)], [0], [-1])
        assert loss[0] == pytest.approx(math.log(7))

    def test_ns_zero_scores(self):
        vocab = small_vocab()
        t = init_table(vocab, d=4, init_scale=0.0)
        loss = stmpr_ns_loss(t, [user_row(vocab, 0)], [poi_row(vocab, 1)], [0], [-1], [[poi_row(vocab, 2)]])
        assert loss[0] == pytest.approx(2 * math.log(2))

    def test_ns_limit(self):
        vocab = small_vocab(n_pois=3)
        t = init_table(vocab, d=1, alpha=0.0, init_scale=0.0)
        t.entity[user_row(vocab, 0)] = 1
        t.rel_v[0] = 1
        t.entity[poi_row(vocab, 0)] = 60
        t.entity[poi_row(vocab, 1)] = -60
        loss = stmpr_ns_loss(t, [user_row(vocab, 0)], [poi_row(vocab, 0)], [0], [-1], [[poi_row(vocab, 1)]])
        assert 0 < loss[0] < 1e-20

    def test_single_category_is_zero(self):
        vocab = small_vocab(n_cat=(1, 1, 1))
        t = random_table(vocab)
        loss = affiliation_loss(t, [poi_row(vocab, 0)], [Relation.C2.row], [cat_row(vocab, 2, 0)])
        assert loss[0] == 0.0

    def test_fourteen_coarse_categories(self):
        vocab = small_vocab(n_cat=(14, 14, 14))
        t = init_table(vocab, d=4, init_scale=0.0)
        loss = affiliation_loss(t, [poi_row(vocab, 0)], [Relation.C3.row], [cat_row(vocab, 3, 5)])
        assert loss[0] == pytest.approx(math.log(14))

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_match_naive(self, seed):
        vocab = small_vocab(n_pois=5, n_cat=(3, 2, 2))
        t = random_table(vocab, d=4, seed=seed, scale=0.5)
        u, p = EntityId(EntityKind.USER, 1), EntityId(EntityKind.POI, 2)
        aux = (EntityId(EntityKind.POI, 4),)
        scores = [score_stmpr(u, EntityId(EntityKind.POI, j), 5, aux, t) for j in range(5)]
        naive_full = -scores[2] + math.log(sum(math.exp(s) for s in scores))
        full = stmpr_full_loss(t, [vocab.row(u)], [vocab.row(p)], [5], [vocab.row(aux[0])])[0]
        assert full == pytest.approx(naive_full, abs=1e-8)

        sig = lambda z: 1 / (1 + math.exp(-z))
        naive_ns = -math.log(sig(scores[2])) - math.log(sig(-scores[0])) - math.log(sig(-scores[3]))
        ns = stmpr_ns_loss(t, [vocab.row(u)], [vocab.row(p)], [5], [vocab.row(aux[0])], [[poi_row(vocab, 0), poi_row(vocab, 3)]])[0]
        assert ns == pytest.approx(naive_ns, rel=1e-10)

        c = [score_affiliation(p, EntityId(EntityKind.CAT1, j), Relation.C1, t) for j in range(3)]
        naive_aff = -c[1] + math.log(sum(math.exp(s) for s in c))
        aff = affiliation_loss(t, [vocab.row(p)], [Relation.C1.row], [cat_row(vocab, 1, 1)])[0]
        assert aff == pytest.approx(naive_aff, abs=1e-8)

    @given(st.integers(0, 10_000), st.floats(0.1, 20.0))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, seed, scale):
        vocab = small_vocab()
        t = random_table(vocab, d=4, seed=seed, scale=scale)
        b = mixed_batch(vocab)
        assert (stmpr_ns_loss(t, b.users, b.pois, b.bins, b.aux, b.negatives) >= 0).all()
        assert (stmpr_full_loss(t, b.users, b.pois, b.bins, b.aux) >= 0).all()
        assert (affiliation_loss(t, b.aff_subject, b.aff_relation, b.aff_object) >= 0).all()

    def test_ns_ranking_matches_full_softmax(self):
        # with every other PoI as a negative, the per-candidate NS loss orders candidates like softmax
        vocab = small_vocab(n_pois=6)
        t = random_table(vocab, d=4, seed=11, scale=0.8)
        full, ns = [], []
        for j in range(6):
            others = [[poi_row(vocab, k) for k in range(6) if k != j]]
            args = ([user_row(vocab, 0)], [poi_row(vocab, j)], [2], [-1])
            full.append(stmpr_full_loss(t, *args)[0])
            ns.append(stmpr_ns_loss(t, *args, others)[0])
        assert list(np.argsort(full)) == list(np.argsort(ns))


class TestTotalLoss:
    def test_v_only_batch(self, vocab):
        t = random_table(vocab, seed=1)
        b = mixed_batch(vocab)
        b.aff_subject = b.aff_relation = b.aff_object = np.zeros(0, dtype=np.int64)
        parts = total_loss(b, t, TrainConfig(time_reg=0.0))
        assert parts.c_total == 0
        assert parts.total == pytest.approx(parts.v + parts.reg_emb)

    def test_beta_scales_affiliation(self, vocab):
        t = random_table(vocab, seed=1)
        b = mixed_batch(vocab)
        zero = total_loss(b, t, TrainConfig(beta=0.0))
        five = total_loss(b, t, TrainConfig(beta=5.0))
        assert zero.total == pytest.approx(zero.v + zero.reg_emb + zero.reg_time)
        assert five.total - zero.total == pytest.approx(5.0 * five.c_total)
        aff = affiliation_loss(t, b.aff_subject, b.aff_relation, b.aff_object).sum()
        assert five.c_total == pytest.approx(aff)

    def test_beta_zero_affiliation_gradient_only_from_regularizer(self, vocab):
        t = random_table(vocab, seed=1)
        b = mixed_batch(vocab)
        b.users = b.pois = b.bins = b.aux = np.zeros(0, dtype=np.int64)
        cfg = TrainConfig(beta=0.0, emb_reg=0.0)
        grads = SparseGrads()
        total_loss(b, t, cfg, grads)
        for _, g in grads.finalize().values():
            assert not np.any(g)

    def test_presets(self):
        assert BETA_PRESETS["beijing"] == 20.0
        assert TrainConfig().beta == 20.0
        assert TrainConfig.from_dict({"beta": "Shanghai"}).beta == BETA_PRESETS["shanghai"]


class TestNegatives:
    def test_uniform_excludes_positive(self):
        rng = np.random.default_rng(0)
        draws = sample_negative_batch(np.ones(100_000, dtype=np.int64), NoiseDistribution.uniform(3), 1, rng).ravel()
        assert not np.any(draws == 1)
        n = len(draws)
        share = np.mean(draws == 0)
        assert abs(share - 0.5) < 3 * math.sqrt(0.25 / n)

    def test_unigram_excludes_positive(self):
        rng = np.random.default_rng(0)
        noise = NoiseDistribution.unigram([1000, 0, 0])
        draws = sample_negative_batch(np.zeros(500, dtype=np.int64), noise, 4, rng)
        assert not np.any(draws == 0)

    def test_zero_negatives(self):
        assert sample_negatives(0, NoiseDistribution.uniform(3), 0, np.random.default_rng(0)) == []

    def test_deterministic(self):
        a = sample_negatives(2, NoiseDistribution.uniform(10), 20, np.random.default_rng(4))
        b = sample_negatives(2, NoiseDistribution.uniform(10), 20, np.random.default_rng(4))
        assert a == b and len(a) == 20

    def test_one_poi_is_config_error(self):
        with pytest.raises(ConfigError):
            sample_negatives(0, NoiseDistribution.uniform(1), 3, np.random.default_rng(0))


class TestGradStep:
    def test_zero_learning_rate(self, vocab):
        t = random_table(vocab, seed=3)
        before = {k: v.copy() for k, v in t.params().items()}
        cfg = TrainConfig(learning_rate=0.0)
        grad_step(mixed_batch(vocab), t, cfg, LazyAdam(t, 0.0))
        for k, v in t.params().items():
            np.testing.assert_array_equal(v, before[k])

    @pytest.mark.parametrize("optimizer", ["adam", "sgd"])
    def test_only_touched_rows_change(self, optimizer):
        from stkg.training import make_optimizer

        vocab = small_vocab(n_pois=8)
        t = random_table(vocab, seed=3)
        before = t.copy()
        b = Batch(
            np.array([user_row(vocab, 1)]),
            np.array([poi_row(vocab, 2)]),
            np.array([5]),
            np.array([poi_row(vocab, 6)]),
            np.array([[poi_row(vocab, 4)]]),
        )
        cfg = TrainConfig(optimizer=optimizer, time_reg=0.0)
        grad_step(b, t, cfg, make_optimizer(t, cfg))
        changed = set(np.flatnonzero((t.entity != before.entity).any(axis=1)))
        assert changed == {user_row(vocab, 1), poi_row(vocab, 2), poi_row(vocab, 6), poi_row(vocab, 4)}
        assert set(np.flatnonzero((t.time != before.time).any(axis=1))) == {5}
        np.testing.assert_array_equal(t.rel_c, before.rel_c)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_fact(self, vocab):
        t = random_table(vocab, seed=3)
        t.entity[user_row(vocab, 1)] = np.nan
        with pytest.raises(TrainingError, match="user=u1"):
            grad_step(mixed_batch(vocab), t, TrainConfig(), LazyAdam(t, 0.01))


def tiny_dataset(pattern="periodic", variant="V0", parts="V", seed=0):
    spec = SynthSpec(n_users=8, n_pois=20, fanouts=(2, 2, 2), bins_per_day=12, records_per_user=40, pattern=pattern, seed=seed)
    rows, catalog, _ = generate(spec)
    cfg = IngestConfig(bin_minutes=spec.bin_minutes, min_records=0, min_places=0, variant=variant, parts=parts)
    return build_dataset(rows, Catalog.from_rows(catalog), cfg)


class TestTrain:
    def test_loss_decreases(self):
        ds = tiny_dataset()
        cfg = TrainConfig(d=16, n_epoch=5, batch_size=64, n_neg=5, learning_rate=0.02)
        _, report = train(ds.stkg, ds.split, cfg)
        assert all(b < a for a, b in zip(report.loss, report.loss[1:]))

    def test_deterministic_report(self):
        ds = tiny_dataset(variant="V1", parts="V,C")
        cfg = TrainConfig(d=8, n_epoch=2, batch_size=32, n_neg=4, stmpr_variant="V1", graph_parts="V,C")
        t1, r1 = train(ds.stkg, ds.split, cfg)
        t2, r2 = train(ds.stkg, ds.split, cfg)
        r1.seconds = r2.seconds = []
        assert r1.to_dict() == r2.to_dict()
        assert t1.entity.tobytes() == t2.entity.tobytes()

    def test_report_lengths(self):
        ds = tiny_dataset(parts="V,C")
        cfg = TrainConfig(d=8, n_epoch=3, n_neg=3, graph_parts="V,C")
        _, r = train(ds.stkg, ds.split, cfg)
        assert r.epochs == 3
        assert all(len(v) == 3 for v in (r.loss_v, r.valid_mrr, r.seconds, r.loss_c["C1"]))
        assert 0 <= r.best_epoch < 3

    def test_patience_stops_early(self):
        ds = tiny_dataset()
        cfg = TrainConfig(d=8, n_epoch=40, n_neg=3, learning_rate=0.0, patience=2)
        _, r = train(ds.stkg, ds.split, cfg)
        assert r.epochs == 3

    def test_full_softmax_and_homogeneous_batches(self):
        ds = tiny_dataset(parts="V,C")
        cfg = TrainConfig(d=8, n_epoch=2, loss_mode="full", batch_mode="homogeneous", graph_parts="V,C")
        _, r = train(ds.stkg, ds.split, cfg)
        assert r.loss[1] < r.loss[0]

    def test_variant_mismatch(self):
        ds = tiny_dataset()
        with pytest.raises(ConfigError):
            train(ds.stkg, ds.split, TrainConfig(stmpr_variant="V1"))

    def test_missing_cat_affiliation(self):
        ds = tiny_dataset()
        with pytest.raises(ConfigError):
            train(ds.stkg, ds.split, TrainConfig(graph_parts="V,CC"))

    def test_graph_selection_ignores_unselected_parts(self):
        ds = tiny_dataset(parts="V,C")
        only_v = rebuild_for_variant(ds, parts="V")
        cfg = TrainConfig(d=8, n_epoch=1, n_neg=3)
        t1, _ = train(ds.stkg, ds.split, cfg)
        t2, _ = train(only_v.stkg, ds.split, cfg)
        assert t1.entity.tobytes() == t2.entity.tobytes()

    def test_unigram_noise(self):
        ds = tiny_dataset()
        _, r = train(ds.stkg, ds.split, TrainConfig(d=8, n_epoch=2, n_neg=3, noise="unigram"))
        assert r.loss[1] < r.loss[0]

    def test_category_chain_facts_train(self):
        ds = tiny_dataset(parts="V,C,CC")
        assert len(ds.stkg.cat_affiliation_facts) > 0
        _, r = train(ds.stkg, ds.split, TrainConfig(d=8, n_epoch=2, n_neg=3, graph_parts="V,C,CC"))
        assert r.loss_c["CC"][0] > 0


class TestConfig:
    def test_file_round_trip(self, tmp_path):
        cfg = TrainConfig(d=12, alpha=0.25, noise="unigram", strict=False, stmpr_variant="V3", graph_parts="V,C2")
        path = tmp_path / "train.cfg"
        write_config_file(cfg, path)
        assert TrainConfig.from_dict(read_config_file(path)) == cfg

    def test_comments_and_unknown_keys(self, tmp_path):
        path = tmp_path / "train.cfg"
        path.write_text("# comment\nd = 16  # inline\nalpha=0.3\n")
        assert TrainConfig.from_dict(read_config_file(path)).d == 16
        path.write_text("dimension = 16\n")
        with pytest.raises(ConfigError):
            TrainConfig.from_dict(read_config_file(path))

    @pytest.mark.parametrize(
        "kwargs", [dict(alpha=1.2), dict(beta=-1), dict(batch_size=0), dict(noise="zipf"), dict(emb_reg=-0.1)]
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.d, cfg.alpha, cfg.emb_reg, cfg.time_reg, cfg.n_neg) == (100, 0.5, 0.01, 0.01, 50)
