"""``stkg`` command line: gen-synth, build-kg, train, predict, eval.

Exit codes: 0 ok, 1 other library error, 2 configuration error, 3 data error,
4 training failure. ``STKG_OUTPUT_DIR`` sets the base directory for outputs
whose ``--out`` is omitted.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field

from . import __version__
from . import embedding as emb
from . import evaluation as ev
from . import ingest as ig
from . import store
from . import synthgen as sg
from .core import SENTINEL, Calendar, EntityKind, Variant, discretize_timestamp
from .errors import ConfigError, DataError, StkgError
from .training import BETA_PRESETS, TrainConfig, read_config_file, train, write_config_file

logger = logging.getLogger("stkg")

GRAPH_MODELS = {
    "G0": "V",
    "G1": "V,C1",
    "G2": "V,C2",
    "G3": "V,C3",
    "Gall": "V,C1,C2,C3",
}


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    inputs: dict  # path -> sha256
    checkpoint: str | None = None
    metrics: str | None = None
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    version: str = __version__
    seed: int | None = None

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(dataclasses.asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def read(cls, path) -> "RunManifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(**data)


class _Timer:
    def __init__(self, timings: dict, name: str):
        self.timings, self.name = timings, name

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.timings[self.name] = round(time.perf_counter() - self.start, 6)
        return False


def _out_path(value, default_name: str) -> str:
    if value:
        return value
    return os.path.join(os.environ.get("STKG_OUTPUT_DIR", "."), default_name)


def _digests(paths) -> dict:
    return {str(p): store.file_digest(p) for p in paths if p and os.path.exists(p)}


def _kg_files(kg_dir) -> list:
    names = ("meta.json", "vocab.json", "stmpr_facts.csv", "affiliation_facts.csv", "split.csv", "catalog.csv")
    return [os.path.join(kg_dir, n) for n in names if os.path.exists(os.path.join(kg_dir, n))]


def _floats(text: str) -> tuple:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


# -- gen-synth ---------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    spec = sg.SynthSpec(
        n_users=args.n_users,
        n_pois=args.n_pois,
        fanouts=_ints(args.fanouts),
        bins_per_day=args.bins_per_day,
        records_per_user=args.records_per_user,
        pattern=args.pattern,
        epsilon=args.epsilon,
        seed=args.seed,
        n_segments=args.n_segments,
        n_days=args.n_days,
        mixed_fraction=args.mixed_fraction,
    )
    out = _out_path(args.out, "synth")
    timings = {}
    with _Timer(timings, "generate"):
        rows, catalog, truth = sg.generate(spec)
        paths = sg.write_dataset(out, rows, catalog, truth)
    manifest = RunManifest(
        "gen-synth", sys.argv[1:], dataclasses.asdict(spec), {}, outputs=_digests(paths.values()),
        timings=timings, seed=spec.seed,
    )
    manifest.write(os.path.join(out, "manifest.json"))
    print(f"wrote {len(rows)} records for {spec.n_users} users and {spec.n_pois} PoIs to {out}")
    print(f"Bayes Acc@1 ceiling (previous-PoI context): {truth.bayes['acc@1']:.6f}")
    return 0


# -- build-kg ----------------------------------------------------------------


def cmd_build_kg(args) -> int:
    holidays = ()
    if args.holidays:
        holidays = tuple(sorted(d.isoformat() for d in Calendar.from_file(args.holidays).holidays))
    config = ig.IngestConfig(
        bin_minutes=args.bin_minutes,
        tz=args.tz,
        holidays=holidays,
        min_records=args.min_records,
        min_places=args.min_places,
        ratios=_floats(args.ratios),
        keep_last_per_bin=args.keep_last_per_bin,
        variant=args.variant,
        parts=args.graph_parts,
    )
    needs_catalog = config.variant.category_level is not None or any(p != "V" for p in config.parts)
    if needs_catalog and not args.catalog:
        raise ConfigError(
            f"--catalog is required for variant {config.variant.name} / graph parts {','.join(sorted(config.parts))}"
        )
    out = _out_path(args.out, "kg")
    timings = {}
    skipped = []
    with _Timer(timings, "parse"):
        rows = ig.parse_trajectories(args.trajectories, tz=config.tz, lenient=args.lenient, skipped=skipped)
        catalog = ig.parse_catalog(args.catalog) if args.catalog else None
    if not rows:
        raise DataError(f"{args.trajectories}: no trajectory records")
    with _Timer(timings, "build"):
        dataset = ig.build_dataset(rows, catalog, config)
        dataset.coverage.skipped_lines.extend(skipped)
    inputs = _digests([args.trajectories, args.catalog, args.holidays])
    with _Timer(timings, "write"):
        meta = store.save_dataset(dataset, out, inputs)
    manifest = RunManifest("build-kg", sys.argv[1:], config.to_dict(), inputs, timings=timings)
    manifest.outputs = _digests(_kg_files(out))
    manifest.write(os.path.join(out, "manifest.json"))
    print(f"knowledge graph written to {out}")
    for name, n in meta["counts"].items():
        print(f"  {name:<3} {n}")
    print("  split " + " ".join(f"{k}={v}" for k, v in meta["split_counts"].items()))
    cov = dataset.coverage
    print(
        f"  coverage: {len(cov.pois_without_catalog)} PoIs without catalog, "
        f"{len(cov.filtered_users)} users filtered, {len(cov.split_dropped_users)} dropped by split"
    )
    return 0


# -- train -------------------------------------------------------------------


def _train_overrides(args) -> dict:
    out = {}
    for f in dataclasses.fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            out[f.name] = value
    return out


def _resolve_train_config(args, meta: dict | None) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    values.update(_train_overrides(args))
    if meta is not None:
        values.setdefault("stmpr_variant", meta["variant"])
        values.setdefault("graph_parts", ",".join(meta["parts"]))
    return TrainConfig.from_dict(values)


def _run_training(kg_dir, config: TrainConfig, out, argv, inputs=None) -> RunManifest:
    timings = {}
    with _Timer(timings, "load"):
        dataset = store.load_dataset(kg_dir)
    os.makedirs(out, exist_ok=True)
    with _Timer(timings, "train"):
        table, report = train(dataset.stkg, dataset.split, config, catalog=dataset.catalog)
    ckpt = os.path.join(out, "checkpoint.stkg")
    report_path = os.path.join(out, "train_report.json")
    with _Timer(timings, "save"):
        digest = emb.save_checkpoint(table, ckpt)
        with open(report_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(report.to_dict(), fh, indent=2, sort_keys=True, allow_nan=True)
            fh.write("\n")
        write_config_file(config, os.path.join(out, "config.txt"))
    manifest = RunManifest(
        "train",
        list(argv),
        config.to_dict(),
        inputs if inputs is not None else _digests(_kg_files(kg_dir)),
        checkpoint=ckpt,
        metrics=report_path,
        outputs={ckpt: digest},
        timings=timings,
        seed=config.seed,
    )
    manifest.config["kg"] = str(kg_dir)
    manifest.write(os.path.join(out, "manifest.json"))
    best = report.valid_mrr[report.best_epoch] if report.valid_mrr else float("nan")
    print(f"trained {report.epochs} epochs in {timings['train']:.2f}s; best epoch {report.best_epoch + 1} valid MRR {best:.6f}")
    print(f"checkpoint {ckpt} sha256 {digest}")
    return manifest


def cmd_train(args) -> int:
    if args.from_manifest:
        old = RunManifest.read(args.from_manifest)
        cfg = dict(old.config)
        kg_dir = cfg.pop("kg")
        now = _digests(old.inputs)
        if now != old.inputs:
            changed = sorted(set(old.inputs) ^ set(now) | {p for p in now if now[p] != old.inputs.get(p)})
            raise DataError(f"inputs changed since the manifest was written: {', '.join(changed)}")
        config = TrainConfig.from_dict(cfg)
        _run_training(kg_dir, config, _out_path(args.out, "train"), sys.argv[1:], inputs=now)
        return 0
    if not args.kg:
        raise ConfigError("train needs --kg (or --from-manifest)")
    config = _resolve_train_config(args, store.load_meta(args.kg))
    _run_training(args.kg, config, _out_path(args.out, "train"), sys.argv[1:])
    return 0


# -- predict -----------------------------------------------------------------


def _read_query_file(path, dataset, variant: Variant, config: ig.IngestConfig):
    """``user_id,timestamp[,prev_poi_id[,truth_poi_id]]`` per line; header optional.

    Returns (queries, errors) where errors is a list of (line_no, message).
    """
    vocab = dataset.stkg.vocab
    calendar = config.calendar()
    categories = ig.CategoryIndex(dataset.catalog, vocab) if variant.category_level else None
    queries, errors = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, fields in enumerate(csv.reader(fh), 1):
            if not fields or not "".join(fields).strip():
                continue
            if line_no == 1 and fields[0].strip().lower() == "user_id":
                continue
            fields = [f.strip() for f in fields] + ["", ""]
            user_id, ts, prev_id, truth_id = fields[:4]
            user = vocab.get(EntityKind.USER, user_id)
            if user is None:
                errors.append((line_no, f"unknown user {user_id!r}"))
                continue
            try:
                stamp = ig.parse_timestamp(ts, config.tz)
            except (ValueError, DataError) as exc:
                errors.append((line_no, f"bad timestamp {ts!r}: {exc}"))
                continue
            prev = SENTINEL
            if prev_id:
                prev = vocab.get(EntityKind.POI, prev_id)
                if prev is None:
                    errors.append((line_no, f"unknown PoI {prev_id!r}"))
                    continue
            truth = None
            if truth_id:
                truth = vocab.get(EntityKind.POI, truth_id)
                if truth is None:
                    errors.append((line_no, f"unknown PoI {truth_id!r}"))
                    continue
            tbin = discretize_timestamp(stamp, config.bin_minutes, calendar, config.tz)
            aux = ig.aux_for(variant, prev, categories)
            queries.append(ev.Query(user, tbin, aux, truth, stamp))
    return queries, errors


def cmd_predict(args) -> int:
    timings = {}
    with _Timer(timings, "load"):
        table = emb.load_checkpoint(args.checkpoint)
        dataset = store.load_dataset(args.kg)
    if table.vocab != dataset.stkg.vocab:
        raise ConfigError("checkpoint vocabulary does not match the knowledge graph")
    variant = Variant.parse(table.meta.get("variant", dataset.stkg.variant.name))
    inputs = [args.checkpoint, *_kg_files(args.kg)]
    if args.queries:
        queries, errors = _read_query_file(args.queries, dataset, variant, dataset.config)
        for line_no, msg in errors:
            print(f"{args.queries}:{line_no}: {msg}", file=sys.stderr)
        if errors and not args.lenient:
            raise DataError(f"{len(errors)} bad line(s) in {args.queries}")
        inputs.append(args.queries)
    else:
        queries = ev.build_queries(dataset.split, table.vocab, variant, dataset.catalog, partition=args.partition)
    if not queries:
        raise DataError("no queries to predict")
    n_pois = table.vocab.size(EntityKind.POI)
    k = args.k
    if k > n_pois:
        logger.warning("k=%d exceeds the %d candidate PoIs; clamped", k, n_pois)
        k = n_pois
    out = _out_path(args.out, "predictions.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    scorer = ev.TableScorer(table, strict=args.strict)
    with _Timer(timings, "predict"):
        n = ev.write_predictions(out, ev.predict_many(queries, k, scorer), table.vocab)
    manifest = RunManifest(
        "predict", sys.argv[1:], {"k": k, "partition": args.partition, "strict": args.strict, "variant": variant.name},
        _digests(inputs), checkpoint=args.checkpoint, outputs=_digests([out]), timings=timings,
        seed=table.seed,
    )
    manifest.write(out + ".manifest.json")
    print(f"wrote {n} predictions (top-{k}) to {out}")
    return 0


# -- eval --------------------------------------------------------------------


def _metrics_row(label: str, report: ev.MetricsReport) -> dict:
    row = {"setting": label, "mrr": report.mrr}
    row.update({f"acc@{k}": v for k, v in sorted(report.acc.items())})
    row.update({"n_queries": report.n_queries, "n_users": report.n_users})
    return row


def _format_rows(rows) -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = ["\t".join(keys)]
    for r in rows:
        lines.append("\t".join(f"{r[k]:.6f}" if isinstance(r[k], float) else str(r[k]) for k in keys))
    return "\n".join(lines)


def _sweep(args, dataset, base: TrainConfig, ks) -> list:
    settings = []
    if args.sweep_variant:
        for v in args.sweep_variant.split(","):
            settings.append((f"r_{Variant.parse(v).name}", {"variant": Variant.parse(v)}, {}))
    if args.sweep_graph:
        for g in args.sweep_graph.split(","):
            g = g.strip()
            if g not in GRAPH_MODELS:
                raise ConfigError(f"unknown graph model {g!r}; expected one of {', '.join(GRAPH_MODELS)}")
            settings.append((g, {"parts": GRAPH_MODELS[g]}, {}))
    if args.sweep_alpha:
        for a in _floats(args.sweep_alpha):
            settings.append((f"alpha={a:g}", {}, {"alpha": a}))
    rows = []
    for label, data_changes, cfg_changes in settings:
        ds = ig.rebuild_for_variant(dataset, data_changes.get("variant"), data_changes.get("parts"))
        config = base.replace(
            stmpr_variant=ds.stkg.variant.name, graph_parts=",".join(sorted(ds.stkg.parts)), **cfg_changes
        )
        table, _ = train(ds.stkg, ds.split, config, catalog=ds.catalog)
        queries = ev.build_queries(ds.split, ds.stkg.vocab, config.variant, ds.catalog)
        report = ev.evaluate(queries, ev.TableScorer(table), ks, args.averaging, users=ds.split.users)
        report.check()
        rows.append(_metrics_row(label, report))
        logger.info("%s MRR %.6f", label, report.mrr)
    return rows


def cmd_eval(args) -> int:
    ks = _ints(args.ks)
    timings = {}
    out = _out_path(args.out, "eval")
    os.makedirs(out, exist_ok=True)
    dataset = store.load_dataset(args.kg)
    vocab = dataset.stkg.vocab
    inputs = list(_kg_files(args.kg))
    result = {}
    rows = []
    sweeping = args.sweep_variant or args.sweep_graph or args.sweep_alpha
    if args.predictions:
        inputs.append(args.predictions)
        by_user = ev.read_prediction_ranks(args.predictions, vocab)
        if not by_user:
            raise DataError(f"{args.predictions}: no ranked predictions (empty test set?)")
        report = ev.metrics_from_ranks(by_user, ks, args.averaging)
        report.check()
        result["metrics"] = report.to_dict(vocab)
        rows.append(_metrics_row("predictions", report))
    elif args.checkpoint:
        inputs.append(args.checkpoint)
        table = emb.load_checkpoint(args.checkpoint)
        if table.vocab != vocab:
            raise ConfigError("checkpoint vocabulary does not match the knowledge graph")
        variant = Variant.parse(table.meta.get("variant", dataset.stkg.variant.name))
        queries = ev.build_queries(dataset.split, vocab, variant, dataset.catalog, partition=args.partition)
        scorer = ev.TableScorer(table)
        with _Timer(timings, "evaluate"):
            report = ev.evaluate(queries, scorer, ks, args.averaging, users=dataset.split.users)
        report.check()
        result["metrics"] = report.to_dict(vocab)
        rows.append(_metrics_row("model", report))
        if args.buckets:
            train_records = [r for recs in dataset.split.train.values() for r in recs]
            edges = _ints(args.buckets)
            groups = ev.group_by_frequency(queries, train_records, edges, scorer, ks)
            result["frequency_buckets"] = {}
            for b, rep in groups.items():
                lo = edges[b]
                hi = f"{edges[b + 1] - 1}" if b + 1 < len(edges) else "inf"
                label = f"visits {lo}..{hi}"
                result["frequency_buckets"][label] = rep.summary()
                rows.append(_metrics_row(label, rep))
    elif not sweeping:
        raise ConfigError("eval needs --predictions, --checkpoint or a sweep option")

    if args.baseline:
        train_records = [r for recs in dataset.split.train.values() for r in recs]
        base = ev.frequency_baseline(train_records, vocab)
        queries = ev.build_queries(dataset.split, vocab, Variant.V0, partition=args.partition)
        rep = ev.evaluate(queries, base, ks, args.averaging, users=dataset.split.users)
        result["baseline"] = rep.summary()
        rows.append(_metrics_row("frequency-baseline", rep))

    config = None
    if sweeping:
        config = _resolve_train_config(args, None)
        with _Timer(timings, "sweep"):
            sweep_rows = _sweep(args, dataset, config, ks)
        result["sweep"] = sweep_rows
        rows.extend(sweep_rows)

    metrics_path = os.path.join(out, "metrics.json")
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    table_text = _format_rows(rows)
    with open(os.path.join(out, "metrics.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(table_text + "\n")
    manifest = RunManifest(
        "eval", sys.argv[1:],
        {"ks": list(ks), "averaging": args.averaging, "train": config.to_dict() if config else None},
        _digests(inputs), checkpoint=args.checkpoint, metrics=metrics_path, timings=timings,
        seed=config.seed if config else None,
    )
    manifest.write(os.path.join(out, "manifest.json"))
    print(table_text)
    return 0


# -- argument parsing --------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration (overrides --config)")
    g.add_argument("--config", help="flat key = value config file")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            g.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
            continue
        names = [flag]
        if f.name == "stmpr_variant":
            names.append("--variant")
        helptext = f"default {f.default}"
        if f.name == "beta":
            helptext += f"; presets {', '.join(f'{k}={v:g}' for k, v in BETA_PRESETS.items())}"
        g.add_argument(*names, dest=f.name, default=None, metavar=f.name.upper(), help=helptext)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stkg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset with planted structure")
    p.add_argument("--out")
    p.add_argument("--n-users", type=int, default=20)
    p.add_argument("--n-pois", type=int, default=60)
    p.add_argument("--fanouts", default="4,2,2", help="categories per level, coarse to fine")
    p.add_argument("--bins-per-day", type=int, default=48)
    p.add_argument("--records-per-user", type=int, default=60)
    p.add_argument("--pattern", choices=sg.PATTERNS, default="periodic")
    p.add_argument("--epsilon", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-segments", type=int, default=4)
    p.add_argument("--n-days", type=int, default=0)
    p.add_argument("--mixed-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("build-kg", help="build the knowledge graph from trajectories and a catalog")
    p.add_argument("--trajectories", required=True)
    p.add_argument("--catalog")
    p.add_argument("--holidays", help="file with one YYYY-MM-DD holiday per line")
    p.add_argument("--out")
    p.add_argument("--variant", default="V0")
    p.add_argument("--graph-parts", default="V")
    p.add_argument("--bin-minutes", type=int, default=30)
    p.add_argument("--tz", default="UTC")
    p.add_argument("--min-records", type=int, default=30)
    p.add_argument("--min-places", type=int, default=5)
    p.add_argument("--ratios", default="0.7,0.1,0.2")
    p.add_argument("--keep-last-per-bin", action="store_true")
    p.add_argument("--lenient", action="store_true", help="skip malformed lines instead of failing")
    p.set_defaults(func=cmd_build_kg)

    p = sub.add_parser("train", help="train embeddings on a built knowledge graph")
    p.add_argument("--kg")
    p.add_argument("--out")
    p.add_argument("--from-manifest", help="rerun the training recorded in a manifest")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="top-k PoI predictions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--queries", help="user_id,timestamp[,prev_poi_id[,truth_poi_id]] per line")
    p.add_argument("--partition", choices=("valid", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("-k", "--k", type=int, default=10)
    p.add_argument("--strict", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--lenient", action="store_true", help="skip bad query lines after reporting them")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="metrics, frequency buckets and ablation sweeps")
    p.add_argument("--kg", required=True)
    p.add_argument("--predictions")
    p.add_argument("--checkpoint")
    p.add_argument("--partition", choices=("valid", "test"), default="test")
    p.add_argument("--out")
    p.add_argument("--ks", default="1,5,10")
    p.add_argument("--averaging", choices=("macro", "micro"), default="macro")
    p.add_argument("--buckets", help="ascending visit-count bucket edges starting at 0, e.g. 0,1,3,10")
    p.add_argument("--baseline", action="store_true", help="also report the frequency baseline")
    p.add_argument("--sweep-variant", help="e.g. V0,V1,V2,V3,V4")
    p.add_argument("--sweep-graph", help=f"subset of {','.join(GRAPH_MODELS)}")
    p.add_argument("--sweep-alpha", help="e.g. 0,0.25,0.5,0.75,1")
    _add_train_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except StkgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
