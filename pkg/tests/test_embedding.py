import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_table, small_vocab
from stkg.core import DayType, EntityId, EntityKind, Relation, TimeBin
from stkg.embedding import (
    aux_embedding,
    d1_for,
    init_table,
    load_checkpoint,
    relation_embedding,
    save_checkpoint,
    score_affiliation,
    score_stmpr,
    score_stmpr_batch,
)
from stkg.errors import ConfigError

U0 = EntityId(EntityKind.USER, 0)
P0 = EntityId(EntityKind.POI, 0)
P1 = EntityId(EntityKind.POI, 1)
B0 = TimeBin(0, DayType.WORKING)


def ones_table(d=3, alpha=0.5, vocab=None):
    t = init_table(vocab or small_vocab(), d=d, alpha=alpha, init_scale=0.0)
    for arr in t.params().values():
        arr[...] = 1.0
    return t


def naive_score(u, rel, t, aux, p, d1):
    """Loop-based reference for the triple product."""
    total = 0.0
    for i in range(len(u)):
        r = rel[i] * (t[i].conjugate() if i < d1 else 1)
        for a in aux:
            r = r * a[i]
        total += (u[i] * r * p[i].conjugate()).real
    return total


class TestAux:
    def test_empty_is_ones(self, vocab):
        np.testing.assert_array_equal(aux_embedding((), random_table(vocab)), np.ones(4))

    def test_single_unchanged(self, vocab):
        t = random_table(vocab)
        np.testing.assert_array_equal(aux_embedding((P1,), t), t.entity_vec(P1))

    def test_two_factor_product(self, vocab):
        t = init_table(vocab, d=1, init_scale=0.0)
        t.entity[vocab.row(P0)] = 1 + 1j
        t.entity[vocab.row(P1)] = 2
        assert aux_embedding((P0, P1), t)[0] == 2 + 2j
        assert complex(1, 1) * complex(2, 0) == 2 + 2j


class TestRelation:
    def test_example(self, vocab):
        t = init_table(vocab, d=2, alpha=0.5, init_scale=0.0)
        t.rel_v[0] = [1, 1]
        t.time[0] = [1j]
        np.testing.assert_array_equal(relation_embedding(B0, (), t, alpha=0.5), [-1j, 1])

    def test_alpha_zero_ignores_time(self, vocab):
        t = random_table(vocab, alpha=0.0)
        assert t.time.shape[1] == 0
        np.testing.assert_array_equal(relation_embedding(B0, (P0,), t), t.rel_v[0] * t.entity_vec(P0))

    def test_alpha_one_no_aux(self, vocab):
        t = random_table(vocab, alpha=1.0)
        np.testing.assert_allclose(relation_embedding(3, (), t), t.rel_v[0] * np.conj(t.time[3]))

    def test_alpha_mismatch(self, vocab):
        with pytest.raises(ValueError):
            relation_embedding(B0, (), random_table(vocab, d=4, alpha=0.5), alpha=1.0)


class TestScore:
    def test_all_ones(self, vocab):
        t = ones_table(d=5)
        assert score_stmpr(U0, P0, B0, (P1,), t) == 5
        assert score_affiliation(P0, EntityId(EntityKind.CAT1, 0), Relation.C1, t) == 5

    def test_d1_example(self, vocab):
        t = init_table(vocab, d=1, alpha=0.0, init_scale=0.0)
        t.entity[vocab.row(U0)] = 1 + 1j
        t.rel_v[0] = 1 - 1j
        t.entity[vocab.row(P0)] = 1j
        assert score_stmpr(U0, P0, B0, (), t, alpha=0.0) == 0.0

    def test_affiliation_example(self, vocab):
        t = init_table(vocab, d=1, init_scale=0.0)
        c = EntityId(EntityKind.CAT2, 0)
        t.entity[vocab.row(P0)] = 2
        t.rel_c[Relation.C2.row] = 1j
        t.entity[vocab.row(c)] = 1j
        assert score_affiliation(P0, c, Relation.C2, t) == 2

    @given(st.integers(1, 4), st.sampled_from([0.0, 0.25, 0.5, 1.0]), st.integers(0, 10_000), st.integers(0, 2))
    @settings(max_examples=60, deadline=None)
    def test_matches_naive(self, d, alpha, seed, n_aux):
        vocab = small_vocab()
        t = random_table(vocab, d=d, alpha=alpha, seed=seed)
        aux = [EntityId(EntityKind.POI, i) for i in range(n_aux)]
        b = TimeBin(2, DayType.NON_WORKING)
        got = score_stmpr(U0, P1, b, aux, t)
        want = naive_score(
            t.entity_vec(U0), t.rel_v[0], t.time_vec(b), [t.entity_vec(a) for a in aux], t.entity_vec(P1), t.d1
        )
        assert got == pytest.approx(want, rel=1e-10, abs=1e-12)

    @given(st.integers(1, 4), st.integers(0, 10_000), st.sampled_from(list(Relation)))
    @settings(max_examples=40, deadline=None)
    def test_affiliation_matches_naive(self, d, seed, rel):
        vocab = small_vocab()
        t = random_table(vocab, d=d, seed=seed)
        subj = P0 if rel is not Relation.CAT_CAT else EntityId(EntityKind.CAT1, 0)
        obj = EntityId(EntityKind.CAT2, 1)
        want = sum((a * r * np.conj(c)).real for a, r, c in zip(t.entity_vec(subj), t.rel_c[rel.row], t.entity_vec(obj)))
        assert score_affiliation(subj, obj, rel, t) == pytest.approx(want, rel=1e-10, abs=1e-12)

    def test_linear_in_user(self, vocab):
        t = random_table(vocab, d=6)
        base = score_stmpr(U0, P0, B0, (P1,), t)
        t.entity[vocab.row(U0)] *= -2.5
        assert score_stmpr(U0, P0, B0, (P1,), t) == pytest.approx(-2.5 * base)

    def test_antisymmetry(self):
        vocab = small_vocab()
        t = init_table(vocab, d=1, alpha=0.0, init_scale=0.0)
        p_user = EntityId(EntityKind.USER, 1)
        t.rel_v[0] = 1j
        t.entity[vocab.row(U0)] = 0.3 + 0.8j
        t.entity[vocab.row(p_user)] = -0.5 + 0.2j
        # same vectors placed as (user, poi) then swapped
        t.entity[vocab.row(P0)] = t.entity[vocab.row(p_user)]
        t.entity[vocab.row(P1)] = t.entity[vocab.row(U0)]
        forward = score_stmpr(U0, P0, B0, (), t)
        backward = score_stmpr(p_user, P1, B0, (), t)
        assert forward != 0
        assert backward == pytest.approx(-forward)

    def test_alpha_zero_time_invariant(self, vocab):
        t = random_table(vocab, d=5, alpha=0.0)
        scores = {score_stmpr(U0, P1, b, (P0,), t) for b in range(vocab.n_bins)}
        assert len(scores) == 1


class TestBatch:
    @pytest.mark.parametrize("precision", [32, 64])
    def test_bitwise_equal_to_scalar(self, precision):
        vocab = small_vocab(n_pois=100)
        t = init_table(vocab, d=8, alpha=0.5, seed=3, precision=precision)
        cands = [EntityId(EntityKind.POI, i) for i in range(100)]
        aux = (EntityId(EntityKind.POI, 7),)
        batch = score_stmpr_batch(U0, B0, aux, cands, t, strict=True)
        loop = np.array([score_stmpr(U0, c, B0, aux, t) for c in cands])
        assert np.max(np.abs(batch - loop)) == 0

    def test_singleton(self, vocab):
        t = random_table(vocab)
        assert score_stmpr_batch(U0, B0, (), [P1], t)[0] == score_stmpr(U0, P1, B0, (), t)

    def test_all_ones(self, vocab):
        t = ones_table(d=4)
        cands = [EntityId(EntityKind.POI, i) for i in range(5)]
        np.testing.assert_array_equal(score_stmpr_batch(U0, B0, (), cands, t), [4.0] * 5)

    def test_fast_mode_close(self):
        vocab = small_vocab(n_pois=50)
        t = init_table(vocab, d=16, seed=1)
        cands = [EntityId(EntityKind.POI, i) for i in range(50)]
        fast = score_stmpr_batch(U0, B0, (P0,), cands, t, strict=False)
        exact = score_stmpr_batch(U0, B0, (P0,), cands, t, strict=True)
        np.testing.assert_allclose(fast, exact, rtol=1e-12, atol=1e-15)


class TestInit:
    def test_deterministic(self, vocab):
        a, b = init_table(vocab, d=8, seed=5), init_table(vocab, d=8, seed=5)
        for name in a.PARAM_NAMES:
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        assert not np.array_equal(a.entity, init_table(vocab, d=8, seed=6).entity)

    def test_zero_scale(self, vocab):
        t = init_table(vocab, d=8, init_scale=0.0)
        assert all(not np.any(arr) for arr in t.params().values())

    def test_default_dimension(self, vocab):
        t = init_table(vocab)
        assert t.d == 100 and t.d1 == 50
        assert t.entity.shape == (vocab.n_entity_rows, 100)
        assert t.time.shape == (vocab.n_bins, 50)

    def test_scale_statistics(self):
        vocab = small_vocab(n_users=200, n_pois=300)
        t = init_table(vocab, d=50, init_scale=0.3)
        assert np.std(t.entity.real) == pytest.approx(0.3, rel=0.05)
        assert np.std(t.entity.imag) == pytest.approx(0.3, rel=0.05)

    @pytest.mark.parametrize("kwargs", [dict(d=0), dict(alpha=1.5), dict(alpha=-0.1), dict(precision=16)])
    def test_bad_args(self, vocab, kwargs):
        with pytest.raises(ConfigError):
            init_table(vocab, **kwargs)


class TestD1:
    @pytest.mark.parametrize(
        "alpha, d, expected", [(0.5, 100, 50), (0.5, 3, 2), (0.25, 2, 1), (0.0, 7, 0), (1.0, 7, 7), (0.3, 5, 2)]
    )
    def test_round_half_up(self, alpha, d, expected):
        assert d1_for(alpha, d) == expected


class TestCheckpoint:
    @pytest.mark.parametrize("precision", [32, 64])
    def test_round_trip_bitwise(self, tmp_path, vocab, precision):
        t = init_table(vocab, d=6, alpha=0.5, seed=9, precision=precision)
        t.meta["note"] = "x"
        path = tmp_path / "m.stkg"
        digest = save_checkpoint(t, path)
        back = load_checkpoint(path)
        assert back.vocab == vocab and (back.d, back.d1, back.seed) == (6, 3, 9)
        for name in t.PARAM_NAMES:
            assert getattr(back, name).tobytes() == getattr(t, name).tobytes()
        assert back.meta == {"note": "x"}
        assert save_checkpoint(back, tmp_path / "again.stkg") == digest
        assert (tmp_path / "again.stkg").read_bytes() == path.read_bytes()

    def test_manifest(self, tmp_path, vocab):
        import json

        path = tmp_path / "m.stkg"
        save_checkpoint(init_table(vocab, d=4), path)
        manifest = json.loads((tmp_path / "m.stkg.json").read_text())
        assert manifest["d"] == 4 and manifest["d1"] == 2 and manifest["alpha"] == 0.5
        assert manifest["sizes"]["Poi"] == vocab.size(EntityKind.POI)

    def test_rejects_garbage(self, tmp_path):
        from stkg.errors import DataError

        path = tmp_path / "bad.stkg"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(DataError):
            load_checkpoint(path)

    def test_rejects_truncated(self, tmp_path, vocab):
        from stkg.errors import DataError

        path = tmp_path / "m.stkg"
        save_checkpoint(init_table(vocab, d=4), path)
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(DataError):
            load_checkpoint(path)
