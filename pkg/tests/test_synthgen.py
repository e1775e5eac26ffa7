import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stkg.core import EntityKind
from stkg.errors import ConfigError
from stkg.evaluation import build_queries
from stkg.ingest import Catalog, IngestConfig, build_dataset, parse_catalog, parse_trajectories
from stkg.synthgen import (
    EPOCH_START,
    GroundTruth,
    SynthSpec,
    bayes_optimal_metrics,
    category_tree,
    generate,
    write_dataset,
)


def ingest(spec, rows, catalog, variant="V0"):
    cfg = IngestConfig(bin_minutes=spec.bin_minutes, min_records=0, min_places=0, variant=variant)
    return build_dataset(rows, Catalog.from_rows(catalog), cfg)


class TestSpec:
    def test_default_days(self):
        assert SynthSpec(records_per_user=60).days == 10
        assert SynthSpec(records_per_user=61).days == 11

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(pattern="zigzag"),
            dict(fanouts=(0, 2, 2)),
            dict(epsilon=1.5),
            dict(bins_per_day=7),
            dict(n_pois=5),  # periodic needs 8 distinct PoIs
            dict(pattern="markov", n_pois=3, fanouts=(4, 1, 1)),
            dict(records_per_user=100, n_days=1, bins_per_day=48),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            SynthSpec(**kwargs)

    def test_category_tree(self):
        fine, mid, coarse = category_tree(SynthSpec(n_pois=20, fanouts=(2, 3, 2)))
        assert list(fine[:13]) == list(range(12)) + [0]
        assert all(m == f // 2 for f, m in zip(fine, mid))
        assert all(c == m // 3 for m, c in zip(mid, coarse))

    def test_mixed_users(self):
        spec = SynthSpec(n_users=10, pattern="mixed", mixed_fraction=0.3)
        assert [spec.user_pattern(u) for u in range(10)] == ["periodic"] * 3 + ["markov"] * 7


class TestGenerate:
    def test_periodic_follows_map(self):
        spec = SynthSpec(n_users=5, n_pois=30, bins_per_day=12, records_per_user=50, seed=3)
        rows, _, truth = generate(spec)
        assert truth.bayes["acc@1"] == 1.0
        for r in rows:
            offset = r.timestamp - int(EPOCH_START.timestamp())
            day, within = divmod(offset, 86400)
            slot = within // (spec.bin_minutes * 60)
            weekday = (EPOCH_START.weekday() + day) % 7
            regime = spec.regime(int(weekday >= 5), slot)
            assert truth.user_maps[r.user_id][regime] == r.poi_id

    def test_bin_centres(self):
        spec = SynthSpec(n_users=3, bins_per_day=48, records_per_user=30)
        rows, _, _ = generate(spec)
        half = spec.bin_minutes * 30
        assert all((r.timestamp - int(EPOCH_START.timestamp())) % (spec.bin_minutes * 60) == half for r in rows)

    def test_one_record_per_cell(self):
        rows, _, _ = generate(SynthSpec(n_users=4, records_per_user=100))
        per_user = {}
        for r in rows:
            per_user.setdefault(r.user_id, []).append(r.timestamp)
        assert all(len(set(ts)) == 100 and ts == sorted(ts) for ts in per_user.values())

    def test_noisy_ceiling_closed_form(self):
        spec = SynthSpec(n_users=5, n_pois=1000, pattern="noisy", epsilon=0.2, records_per_user=50)
        _, _, truth = generate(spec)
        assert truth.bayes["acc@1"] == pytest.approx(0.8 + 0.2 / 1000)

    def test_noisy_ceiling_by_simulation(self):
        spec = SynthSpec(n_users=50, n_pois=100, pattern="noisy", epsilon=0.2, records_per_user=400, n_days=70, seed=7)
        rows, _, truth = generate(spec)
        offset0 = int(EPOCH_START.timestamp())
        hits = []
        for r in rows:
            day, within = divmod(r.timestamp - offset0, 86400)
            regime = spec.regime(int((EPOCH_START.weekday() + day) % 7 >= 5), within // (spec.bin_minutes * 60))
            hits.append(truth.user_maps[r.user_id][regime] == r.poi_id)
        n = len(hits)
        expected = truth.bayes["acc@1"]
        assert abs(np.mean(hits) - expected) < 4 * np.sqrt(expected * (1 - expected) / n)

    def test_markov_transitions(self):
        spec = SynthSpec(n_users=6, n_pois=40, fanouts=(4, 1, 1), pattern="markov", records_per_user=50, seed=2)
        rows, _, truth = generate(spec)
        assert sorted(truth.transition) == [0, 1, 2, 3]
        assert all(truth.transition[c] != c for c in range(4))
        prev = {}
        for r in rows:
            p = int(r.poi_id[1:])
            if r.user_id in prev:
                assert truth.poi_coarse[p] == truth.transition[truth.poi_coarse[prev[r.user_id]]]
            prev[r.user_id] = p
        # 40 PoIs over 4 coarse categories: 10 each
        assert truth.bayes["acc@1"] == pytest.approx(1 / 10)

    def test_seed_gives_identical_files(self, tmp_path):
        spec = SynthSpec(n_users=5, pattern="mixed", seed=9)
        digests = []
        for name in ("a", "b"):
            paths = write_dataset(tmp_path / name, *generate(spec))
            digests.append([hashlib.sha256(open(p, "rb").read()).hexdigest() for p in paths.values()])
        assert digests[0] == digests[1]
        other = write_dataset(tmp_path / "c", *generate(SynthSpec(n_users=5, pattern="mixed", seed=10)))
        assert open(other["trajectories"], "rb").read() != open(tmp_path / "a" / "trajectories.csv", "rb").read()

    def test_files_round_trip_through_ingest(self, tmp_path):
        spec = SynthSpec(n_users=6, records_per_user=40, pattern="mixed")
        rows, catalog, truth = generate(spec)
        paths = write_dataset(tmp_path, rows, catalog, truth)
        parsed = parse_trajectories(paths["trajectories"])
        assert [r[:3] for r in parsed] == [r[:3] for r in rows]
        cat = parse_catalog(paths["catalog"])
        assert len(cat) == spec.n_pois
        ds = build_dataset(parsed, cat, IngestConfig(bin_minutes=spec.bin_minutes, min_records=40, min_places=2))
        assert ds.stkg.vocab.size(EntityKind.USER) == 6
        assert not ds.split.dropped_users
        loaded = GroundTruth.from_dict(json.loads(open(paths["truth"]).read()))
        assert loaded.to_dict() == truth.to_dict()

    @given(st.integers(0, 2**31), st.sampled_from(["periodic", "noisy", "markov", "mixed"]))
    @settings(max_examples=15, deadline=None)
    def test_always_ingestible(self, seed, pattern):
        spec = SynthSpec(n_users=3, n_pois=16, bins_per_day=24, records_per_user=12, pattern=pattern, epsilon=0.5, seed=seed)
        rows, catalog, _ = generate(spec)
        ds = ingest(spec, rows, catalog)
        assert ds.split.n_records("train") + ds.split.n_records("valid") + ds.split.n_records("test") == 36


class TestBayes:
    def test_periodic_all_ones(self):
        spec = SynthSpec(n_users=4, records_per_user=40)
        rows, catalog, truth = generate(spec)
        ds = ingest(spec, rows, catalog)
        report = bayes_optimal_metrics(truth, build_queries(ds.split, ds.stkg.vocab, "V0"), ds.stkg.vocab)
        assert report.mrr == 1.0 and all(v == 1.0 for v in report.acc.values())

    def test_markov_ceiling(self):
        spec = SynthSpec(n_users=5, n_pois=60, fanouts=(3, 1, 1), pattern="markov", records_per_user=40, seed=1)
        rows, catalog, truth = generate(spec)
        ds = ingest(spec, rows, catalog, variant="V1")
        report = bayes_optimal_metrics(truth, build_queries(ds.split, ds.stkg.vocab, "V1"), ds.stkg.vocab)
        assert report.acc[1] == pytest.approx(1 / 20)
        assert report.acc[10] == pytest.approx(10 / 20)
        assert report.mrr == pytest.approx(sum(1 / k for k in range(1, 21)) / 20)

    def test_noisy_matches_count(self):
        spec = SynthSpec(n_users=40, n_pois=200, pattern="noisy", epsilon=0.3, records_per_user=200, n_days=40, seed=4)
        rows, catalog, truth = generate(spec)
        ds = ingest(spec, rows, catalog)
        vocab = ds.stkg.vocab
        queries = build_queries(ds.split, vocab, "V0")
        report = bayes_optimal_metrics(truth, queries, vocab)
        hits = [
            truth.user_maps[vocab.external_of(q.user)][spec.regime(int(q.bin.day_type), q.bin.slot)]
            == vocab.external_of(q.truth)
            for q in queries
        ]
        assert abs(report.acc[1] - np.mean(hits)) < 4 * np.sqrt(0.7 * 0.3 / len(hits))
