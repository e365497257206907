"""Command-line entry point. Every run writes ``<primary output>.manifest.json`` before anything else."""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .ablation import run_ablation
from .align import Vocab, gradcheck_suite, load_checkpoint, save_checkpoint
from .annotate import (
    annotate_locations,
    load_corrections,
    load_fixture,
    refine_with_partition,
    save_fixture,
    synthetic_fixture,
)
from .baseline import address_table, build_database, compare, evaluate_pipeline
from .configio import build_config, read_kv_file
from .geodata import (
    Address,
    filter_city,
    load_dataset,
    load_split,
    merge_datasets,
    parse_address_text,
    restrict_split,
    save_dataset,
    save_split,
    split_dataset,
    subsample_views,
)
from .infer_eval import (
    constrained_sweep,
    evaluate_model,
    neighborhood_constrained,
    similarity_map,
    training_addresses,
    write_similarity_csv,
)
from .partition import DEFAULT_MIN_LOCATIONS, DEFAULT_THRESHOLD, level_counts, run_partition
from .synthcity import CityConfig, generate_city, load_graph, save_graph
from .trainer import TrainConfig, train

logger = logging.getLogger("addressloc")

MANIFEST_SUFFIX = ".manifest.json"


class CliError(Exception):
    pass


@dataclasses.dataclass
class RunManifest:
    subcommand: str
    config: dict
    inputs: dict[str, str]
    seed: int | None
    version: str = __version__
    timestamp: str = ""

    def comparable(self) -> dict:
        """Manifest content without the wall-clock field."""
        d = dataclasses.asdict(self)
        d.pop("timestamp")
        return d

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest_path(primary: str | Path) -> Path:
    return Path(str(primary) + MANIFEST_SUFFIX)


def _require(*paths: str | None) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise CliError(f"input file not found: {p}")


def _start(args: argparse.Namespace, primary: str, inputs: Sequence[str | None], config: dict | None = None) -> None:
    """Check inputs, then write the manifest ahead of any output."""
    present = [p for p in inputs if p is not None]
    _require(*present)
    cfg = config if config is not None else {
        k: v for k, v in sorted(vars(args).items()) if k not in ("func", "verbose")
    }
    manifest = RunManifest(
        subcommand=args.command,
        config=cfg,
        inputs={p: file_digest(p) for p in present},
        seed=getattr(args, "seed", None),
        timestamp=dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds"),
    )
    Path(primary).parent.mkdir(parents=True, exist_ok=True)
    manifest.write(manifest_path(primary))


def _write_json(obj, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _add_dataclass_flags(p: argparse.ArgumentParser, cls, skip: Sequence[str] = ()) -> None:
    """One ``--field-name`` flag per dataclass field, parsed later by build_config."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        p.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, default=None, metavar="V")


def _flag_layer(args: argparse.Namespace, cls) -> dict:
    return {f.name: getattr(args, "cfg_" + f.name, None) for f in dataclasses.fields(cls)}


def _resolve(args: argparse.Namespace, cls, extra: dict | None = None):
    """Defaults < config file < flags."""
    file_layer = read_kv_file(args.config) if getattr(args, "config", None) else None
    return build_config(cls, file_layer, _flag_layer(args, cls), extra or {})


def _load_labels(path: str) -> dict[str, Address]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return {loc: Address.from_json(a) for loc, a in obj["labels"].items()}


# --- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    seed = {"seed": args.seed} if args.seed is not None else {}
    cfg = _resolve(args, CityConfig, seed)
    args.seed = cfg.seed
    _start(args, args.out_dataset, [args.config], {"city": dataclasses.asdict(cfg),
                                                 "out_graph": args.out_graph, "out_dataset": args.out_dataset})
    graph, ds = generate_city(cfg)
    save_graph(graph, args.out_graph)
    save_dataset(ds, args.out_dataset)
    logger.info("synth: %d samples, %d locations", len(ds.samples), len(ds.location_ids))
    return 0


def cmd_partition(args) -> int:
    _start(args, args.out, [args.graph, args.dataset, args.annotations])
    graph = load_graph(args.graph)
    ds = load_dataset(args.dataset)
    coords = {loc: c for loc, (c, _) in ds.locations().items()}
    result = run_partition(graph, coords, args.threshold, args.min_locations)
    labels = result.labels
    if args.annotations:
        labels = refine_with_partition(_load_labels(args.annotations), coords, graph, result)
    save_dataset(ds.with_addresses(labels), args.out)
    report = result.report()
    if args.annotations:
        report.update(level_counts(labels.values()))
    if args.report:
        _write_json(report, args.report)
    logger.info("partition: %s", {k: report[k] for k in ("neighborhood", "street", "sub_street")})
    return 0


def cmd_fixture(args) -> int:
    _start(args, args.out, [args.graph, args.dataset])
    graph = load_graph(args.graph)
    ds = load_dataset(args.dataset)
    coords = [(loc, c) for loc, (c, _) in ds.locations().items()]
    save_fixture(synthetic_fixture(graph, coords), args.out)
    return 0


def cmd_annotate(args) -> int:
    _start(args, args.out, [args.dataset, args.fixture, args.corrections])
    ds = load_dataset(args.dataset)
    client = load_fixture(args.fixture)
    corrections = load_corrections(args.corrections) if args.corrections else None
    coords = {loc: c for loc, (c, _) in ds.locations().items()}
    run = annotate_locations(client, coords, args.sample_fraction, args.seed, corrections)
    _write_json({
        "labels": {loc: a.to_json() for loc, a in run.labels.items()},
        "queried": list(run.queried),
        "summary": run.summary(),
    }, args.out)
    logger.info("annotate: %s", run.summary())
    return 0


def cmd_split(args) -> int:
    _start(args, args.out, [args.dataset])
    save_split(split_dataset(load_dataset(args.dataset), args.seed), args.out)
    return 0


def cmd_train(args) -> int:
    seed = {"seed": args.seed} if args.seed is not None else {}
    cfg = _resolve(args, TrainConfig, seed)
    args.seed = cfg.seed
    _start(args, args.out_checkpoint, [args.config, args.dataset, args.split],
           {"train": dataclasses.asdict(cfg), "dataset": args.dataset, "split": args.split,
            "out_checkpoint": args.out_checkpoint, "log": args.log})
    ds = load_dataset(args.dataset)
    split = load_split(args.split)
    params, log = train(ds, split, cfg)
    save_checkpoint(params, Vocab(ds.vocabulary), args.out_checkpoint)
    if args.log:
        log.save(args.log)
    return 0


def _eval_inputs(args):
    ds = load_dataset(args.dataset)
    split = load_split(args.split)
    if args.city:
        split = restrict_split(split, filter_city(ds, args.city))
    params = load_checkpoint(args.checkpoint, Vocab(ds.vocabulary))
    return ds, split, params


def cmd_eval(args) -> int:
    _start(args, args.out, [args.checkpoint, args.dataset, args.split])
    ds, split, params = _eval_inputs(args)
    report = evaluate_model(ds, split.query, training_addresses(ds, split.train), params)
    report.save(args.out)
    logger.info("eval: %s", report.rates())
    return 0


def cmd_constrained(args) -> int:
    _start(args, args.out, [args.checkpoint, args.dataset, args.split])
    ds, split, params = _eval_inputs(args)
    candidates = training_addresses(ds, split.train)
    if args.prior == "neighborhood":
        out = {"prior": "neighborhood", "metrics": neighborhood_constrained(ds, split.query, candidates, params).rates()}
    else:
        widths = [args.width] if args.width else None
        sweep = constrained_sweep(ds, split.query, candidates, params, widths, args.seed)
        out = {"prior": "streets", "by_width": {str(w): r.rates() for w, r in sweep.items()}}
    _write_json(out, args.out)
    return 0


def cmd_baseline(args) -> int:
    _start(args, args.out, [args.dataset, args.split, args.checkpoint, args.fixture, args.graph])
    if args.fixture and not args.graph:
        raise CliError("--fixture needs --graph to recover cross streets")
    ds, split, params = _eval_inputs(args)
    table = address_table(ds)
    client = locator = None
    if args.fixture:
        graph = load_graph(args.graph)
        client = load_fixture(args.fixture)
        coords = {loc: c for loc, (c, _) in ds.locations().items()}
        part = run_partition(graph, coords)
        locator = lambda street, coord: part.locate(graph, street, coord)  # noqa: E731
    space = params if args.embedding_space else None
    db = build_database(ds, split.database, space)
    pipe = evaluate_pipeline(ds, split.query, db, table, client, locator, space)
    e2e = evaluate_model(ds, split.query, training_addresses(ds, split.train), params)
    comp = compare(e2e, pipe)
    comp.save(args.out)
    print(comp.table())
    return 0


def cmd_simmap(args) -> int:
    _start(args, args.out, [args.checkpoint, args.dataset])
    ds = load_dataset(args.dataset)
    vocab = Vocab(ds.vocabulary)
    params = load_checkpoint(args.checkpoint, vocab)
    rows = similarity_map(parse_address_text(args.address), list(ds.samples), params, vocab)
    write_similarity_csv(rows, args.out)
    return 0


def cmd_gradcheck(args) -> int:
    _start(args, args.out, [])
    s = gradcheck_suite(args.trials, args.seed)
    _write_json({"max_relative_error": s.worst, "weakest_corrupted_control": s.weakest_control,
                 "errors": [float(e) for e in s.errors], "passed": s.passed()}, args.out)
    print(f"gradcheck: worst relative error {s.worst:.3e}, corrupted control {s.weakest_control:.3f}")
    return 0 if s.passed() else 1


def cmd_ablate(args) -> int:
    seed = {"seed": args.seed} if args.seed is not None else {}
    cfg = _resolve(args, TrainConfig, seed)
    args.seed = cfg.seed
    _start(args, args.out, [args.config, args.dataset, args.split],
           {"train": dataclasses.asdict(cfg), "dataset": args.dataset, "split": args.split,
            "out": args.out, "no_freeze": args.no_freeze})
    report = run_ablation(load_dataset(args.dataset), load_split(args.split), cfg, not args.no_freeze)
    report.save(args.out)
    return 0


def cmd_subsample(args) -> int:
    _start(args, args.out, [args.dataset])
    save_dataset(subsample_views(load_dataset(args.dataset), args.per_location, args.seed), args.out)
    return 0


def cmd_merge(args) -> int:
    _start(args, args.out, [args.a, args.b])
    save_dataset(merge_datasets(load_dataset(args.a), load_dataset(args.b)), args.out)
    return 0


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="addressloc", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, parents=[common])
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic grid city")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _add_dataclass_flags(p, CityConfig, skip=("seed",))
    p.add_argument("--out-graph", required=True)
    p.add_argument("--out-dataset", required=True)

    p = add("partition", cmd_partition, "label locations with sub-street addresses")
    p.add_argument("--graph", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--annotations", help="street-level labels from 'annotate'; cross streets come from the partition")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--min-locations", type=int, default=DEFAULT_MIN_LOCATIONS)
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = add("fixture", cmd_fixture, "write a reverse-geocode fixture for a synthetic city")
    p.add_argument("--graph", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)

    p = add("annotate", cmd_annotate, "street-level labels from reverse geocoding")
    p.add_argument("--dataset", required=True)
    p.add_argument("--fixture", required=True)
    p.add_argument("--corrections")
    p.add_argument("--sample-fraction", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("split", cmd_split, "7:2:1 train/database/query split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    for name, func, help in (("train", cmd_train, "train the encoders"),
                             ("ablate", cmd_ablate, "loss and freezing ablations")):
        p = add(name, func, help)
        p.add_argument("--config")
        p.add_argument("--seed", type=int)
        _add_dataclass_flags(p, TrainConfig, skip=("seed",))
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", required=True)
        if name == "train":
            p.add_argument("--out-checkpoint", required=True)
            p.add_argument("--log")
        else:
            p.add_argument("--no-freeze", action="store_true", help="skip the encoder freezing rows")
            p.add_argument("--out", required=True)

    def eval_inputs(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--dataset", required=True)
        p.add_argument("--split", required=True)
        p.add_argument("--city", help="restrict queries to one city of a merged dataset")
        p.add_argument("--out", required=True)

    eval_inputs(add("eval", cmd_eval, "SA/SSA metrics on the query split"))

    p = add("constrained-eval", cmd_constrained, "metrics with a neighborhood or street prior")
    eval_inputs(p)
    p.add_argument("--prior", choices=("streets", "neighborhood"), default="streets")
    p.add_argument("--width", type=int, help="prior street count; default sweeps all widths")
    p.add_argument("--seed", type=int, default=0)

    p = add("baseline", cmd_baseline, "retrieval-then-geocode pipeline vs the trained model")
    eval_inputs(p)
    p.add_argument("--fixture")
    p.add_argument("--graph")
    p.add_argument("--embedding-space", action="store_true", help="retrieve with trained image embeddings")

    p = add("simmap", cmd_simmap, "address-to-image similarity per sample coordinate")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--address", required=True)
    p.add_argument("--out", required=True)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the loss gradients")
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("subsample", cmd_subsample, "keep at most N views per location")
    p.add_argument("--dataset", required=True)
    p.add_argument("--per-location", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = add("merge", cmd_merge, "merge two city datasets")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    return parser


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors, --help, --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # one structured line, then a nonzero exit
        err = {"error": type(exc).__name__, "command": args.command, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
