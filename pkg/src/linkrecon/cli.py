"""Command-line front end: split, train, eval, baseline, sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.  Every output file is written atomically.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .autodiff import NonFiniteError, NotPositiveDefiniteError
from .fsutil import atomic_write_text, sha256_file
from .graph import Graph, GraphError, build_dataset, load_edge_list, read_manifest, split_observed, to_adjacency, write_edge_list, write_manifest
from .metrics import BASELINES, MetricsReport, baseline_matrix, evaluate_reconstruction, inject_spurious, write_ranked_csv
from .model import load_checkpoint, predict, save_checkpoint
from .training import DATASET_OVERRIDES, TrainConfig, TrainingDiverged, train

log = logging.getLogger("linkrecon")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
OUTPUT_ROOT_ENV = "LINKRECON_OUTPUT_ROOT"
# the spurious-link test graph gets its own seed, far from the augmentation seeds seed+1..seed+t
SPURIOUS_SEED_OFFSET = 1_000_003


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str
    dataset_name: str | None = None
    keep_fraction: float = 0.9
    del_fraction: float = 0.1
    add_fraction: float = 0.1
    t: int = 100
    spurious_fraction: float = 0.1
    seed: int = 0
    output_dir: str | None = None
    relabel: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def name(self) -> str:
        return (self.dataset_name or Path(self.dataset).stem).lower()

    @property
    def spurious_seed(self) -> int:
        return self.seed + SPURIOUS_SEED_OFFSET

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "train"}
        d.update(self.train.to_dict())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Flat dict of run and training keys.

        Training keys fall back to the published per-dataset settings, then to
        the package defaults.  ``seed`` drives both the split and the training.
        """
        d = dict(d)
        run_keys = {f.name for f in fields(cls)} - {"train"}
        train_keys = {f.name for f in fields(TrainConfig)}
        unknown = set(d) - run_keys - train_keys
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        if "dataset" not in d or not d["dataset"]:
            raise ConfigError("config needs a 'dataset' edge-list path")
        run = {k: d[k] for k in run_keys if k in d}
        cfg = cls(**run)
        tr = dict(DATASET_OVERRIDES.get(cfg.name, {}))
        tr.update({k: d[k] for k in train_keys if k in d})
        tr["seed"] = cfg.seed
        try:
            cfg.train = TrainConfig(**tr)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ConfigError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        for name in ("del_fraction", "add_fraction", "spurious_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must be in [0, 1), got {v}")
        if int(self.t) != self.t or self.t < 2:
            raise ConfigError(f"t must be an integer >= 2, got {self.t}")
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigError(f"seed must be a non-negative integer, got {self.seed}")


def _output_dir(explicit: str | None, default_name: str) -> Path:
    if explicit:
        out = Path(explicit)
    else:
        out = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / default_name
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _load_graph(path, n=None, relabel=False) -> Graph:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"edge list not found: {p}")
    try:
        return load_edge_list(p, n=n, relabel=relabel)
    except GraphError as exc:
        raise DataError(str(exc)) from None


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _spurious_eval(scores_fn, observed: Graph, original: Graph, fraction: float, seed: int):
    """Missing-link metrics on ``observed`` plus spurious metrics on an injected test graph."""
    scores = scores_fn(observed)
    if fraction > 0:
        sp = inject_spurious(observed, fraction, seed)
        if sp.added:
            return evaluate_reconstruction(scores, original, observed, sp, scores_fn(sp.graph)), scores
    return evaluate_reconstruction(scores, original, observed), scores


def _model_scores(params):
    return lambda g: predict(to_adjacency(g), params)


# -- commands ------------------------------------------------------------------


def cmd_split(edge_list, keep_fraction: float, seed: int, out, relabel: bool = False) -> dict:
    """Write ``observed.txt``, ``holdout.txt`` and ``manifest.json`` under ``out``."""
    if not 0.0 < keep_fraction <= 1.0:
        raise ConfigError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    out = _output_dir(out, Path(edge_list).stem + "-split")
    original = _load_graph(edge_list, relabel=relabel)
    try:
        observed = split_observed(original, keep_fraction, seed)
    except GraphError as exc:
        raise DataError(str(exc)) from None
    holdout = Graph(original.n, original.edges - observed.edges)
    src = str(Path(edge_list).resolve())
    write_edge_list(observed, out / "observed.txt", f"observed graph of {src}\nkeep_fraction={keep_fraction} seed={seed}")
    write_edge_list(holdout, out / "holdout.txt", f"held-out edges of {src}\nkeep_fraction={keep_fraction} seed={seed}")
    manifest = dict(
        original=src,
        observed="observed.txt",
        holdout="holdout.txt",
        n=original.n,
        keep_fraction=keep_fraction,
        seed=seed,
        spurious_seed=seed + SPURIOUS_SEED_OFFSET,
        relabel=relabel,
    )
    write_manifest(out / "manifest.json", **manifest)
    log.info("split %s: %d observed, %d held out", src, observed.m, holdout.m)
    return manifest


def cmd_train(config: RunConfig) -> dict:
    """Split, augment, train, evaluate; writes checkpoint, history, metrics and one record."""
    timings = {}
    t0 = time.perf_counter()
    out = _output_dir(config.output_dir, f"{config.name}-seed{config.seed}")
    original = _load_graph(config.dataset, relabel=config.relabel)
    try:
        dataset = build_dataset(
            original, config.keep_fraction, config.t, config.del_fraction, config.add_fraction, config.seed
        )
    except GraphError as exc:
        raise DataError(str(exc)) from None
    holdout = Graph(original.n, original.edges - dataset.observed.edges)
    write_edge_list(dataset.observed, out / "observed.txt")
    write_edge_list(holdout, out / "holdout.txt")
    write_manifest(
        out / "manifest.json",
        original=str(Path(config.dataset).resolve()),
        observed="observed.txt",
        holdout="holdout.txt",
        n=original.n,
        keep_fraction=config.keep_fraction,
        del_fraction=config.del_fraction,
        add_fraction=config.add_fraction,
        t=config.t,
        seed=config.seed,
        spurious_seed=config.spurious_seed,
        relabel=config.relabel,
    )
    timings["prepare_s"] = time.perf_counter() - t0

    t1 = time.perf_counter()
    params, history = train(dataset, config.train)
    timings["train_s"] = time.perf_counter() - t1
    atomic_write_text(out / "history.csv", history.to_csv())
    ck_sha = save_checkpoint(params, out / "checkpoint.json")

    t2 = time.perf_counter()
    report, scores = _spurious_eval(
        _model_scores(params), dataset.observed, original, config.spurious_fraction, config.spurious_seed
    )
    atomic_write_text(out / "metrics.json", report.to_json() + "\n")
    write_ranked_csv(out / "scores.csv", scores, holdout.edges, dataset.observed.edges)
    timings["eval_s"] = time.perf_counter() - t2
    timings["total_s"] = time.perf_counter() - t0

    record = dict(
        command="train",
        version=__version__,
        config=config.to_dict(),
        dataset=dict(
            path=str(Path(config.dataset).resolve()),
            sha256=sha256_file(config.dataset),
            n=original.n,
            m=original.m,
            observed_m=dataset.observed.m,
            observed_sha256=sha256_file(out / "observed.txt"),
            val_overlap=dataset.val_overlap,
        ),
        best_epoch=history.best_epoch,
        epochs_run=len(history),
        checkpoint_sha256=ck_sha,
        metrics=asdict(report),
        timings=timings,
    )
    atomic_write_text(out / "record.json", _json(record))
    log.info("train done: AUC %.4f AP %.4f (best epoch %d)", report.auc, report.ap, history.best_epoch)
    return record


def _manifest_graphs(manifest_path) -> tuple[dict, Graph, Graph]:
    p = Path(manifest_path)
    if not p.is_file():
        raise DataError(f"manifest not found: {p}")
    try:
        man = read_manifest(p)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{p}: not a JSON manifest ({exc})") from None
    if "observed" not in man:
        raise DataError(f"{p}: manifest has no 'observed' entry")
    n = man.get("n")
    observed = _load_graph(man["observed"], n=n)
    n = observed.n if n is None else n
    if man.get("holdout"):
        hp = Path(man["holdout"])
        held = set() if _edge_free(hp) else _load_graph(hp, n=n).edges
        original = Graph(n, observed.edges | frozenset(held))
    elif man.get("original"):
        original = _load_graph(man["original"], n=n)
    else:
        raise DataError(f"{p}: manifest needs 'holdout' or 'original'")
    return man, observed, original


def _edge_free(path: Path) -> bool:
    if not path.is_file():
        raise DataError(f"edge list not found: {path}")
    text = path.read_text(encoding="utf-8")
    return all(not line.split("#", 1)[0].strip() for line in text.splitlines())


def cmd_eval(checkpoint, manifest, out=None, spurious_fraction: float = 0.1) -> MetricsReport:
    """Inference on the observed graph; writes ``metrics.json`` and ``scores.csv``."""
    man, observed, original = _manifest_graphs(manifest)
    ck = Path(checkpoint)
    if not ck.is_file():
        raise DataError(f"checkpoint not found: {ck}")
    try:
        params = load_checkpoint(ck)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise DataError(f"{ck}: {exc}") from None
    if params.n != observed.n:
        raise DataError(f"checkpoint has n={params.n} but the graph has n={observed.n}")
    out = _output_dir(out, ck.parent.name + "-eval")
    seed = man.get("spurious_seed", man.get("seed", 0) + SPURIOUS_SEED_OFFSET)
    report, scores = _spurious_eval(_model_scores(params), observed, original, spurious_fraction, seed)
    atomic_write_text(out / "metrics.json", report.to_json() + "\n")
    write_ranked_csv(out / "scores.csv", scores, original.edges - observed.edges, observed.edges)
    return report


def cmd_baseline(kind: str, manifest, out=None, epsilon: float = 1e-3, spurious_fraction: float = 0.1) -> MetricsReport:
    """Heuristic scores on the observed graph, evaluated exactly like a trained model."""
    if kind.upper() not in BASELINES:
        raise ConfigError(f"unknown baseline {kind!r}; choose from {', '.join(BASELINES)}")
    man, observed, original = _manifest_graphs(manifest)
    seed = man.get("spurious_seed", man.get("seed", 0) + SPURIOUS_SEED_OFFSET)
    report, _ = _spurious_eval(lambda g: baseline_matrix(kind, g, epsilon), observed, original, spurious_fraction, seed)
    if out:
        out = Path(out)
        if out.suffix != ".json":
            out = _output_dir(str(out), "") / f"baseline-{kind.upper()}.json"
        atomic_write_text(out, report.to_json() + "\n")
    return report


SWEEP_KEYS = {"lambda": "lam", "depth": "layers"}


def _sweep_one(args) -> dict:
    base, key, value, out = args
    cfg = dict(base, **{key: value}, output_dir=str(out))
    record = cmd_train(RunConfig.from_dict(cfg))
    return record


def cmd_sweep(param: str, values: list, base: dict, out=None, jobs: int = 1) -> list[dict]:
    """One training run per value; writes ``summary.csv`` with AUC/AP per value."""
    if param not in SWEEP_KEYS:
        raise ConfigError(f"sweep parameter must be one of {', '.join(SWEEP_KEYS)}, got {param!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_KEYS[param]
    cast = float if key == "lam" else int
    try:
        values = [cast(v) for v in values]
    except (TypeError, ValueError):
        raise ConfigError(f"bad {param} value list: {values!r}") from None
    RunConfig.from_dict(base)  # fail fast on a broken base config
    out = _output_dir(out, f"sweep-{param}")
    tasks = [(base, key, v, out / f"{param}={v}") for v in values]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(tasks))) as pool:
            records = list(pool.map(_sweep_one, tasks))
    else:
        records = [_sweep_one(t) for t in tasks]

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([param, "auc", "ap", "precision_missing", "precision_spurious", "best_epoch", "output_dir"])
    for (_, _, v, d), r in zip(tasks, records):
        m = r["metrics"]
        w.writerow([v, repr(m["auc"]), repr(m["ap"]), repr(m["precision_missing"]), repr(m["precision_spurious"]), r["best_epoch"], str(d)])
    atomic_write_text(out / "summary.csv", buf.getvalue())
    return records


# -- argument parsing ------------------------------------------------------------

# flag name -> config key
_TRAIN_FLAGS = {
    "dataset": "dataset",
    "dataset_name": "dataset_name",
    "out": "output_dir",
    "seed": "seed",
    "t": "t",
    "keep": "keep_fraction",
    "del_fraction": "del_fraction",
    "add_fraction": "add_fraction",
    "spurious_fraction": "spurious_fraction",
    "epochs": "epochs",
    "lr": "learning_rate",
    "weight_decay": "weight_decay",
    "dropout": "dropout_rate",
    "lam": "lam",
    "layers": "layers",
    "hidden": "hidden",
    "batch": "batch",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; missing keys use the defaults")
    p.add_argument("--dataset", help="original edge list")
    p.add_argument("--dataset-name", help="name used to pick per-dataset settings (default: file stem)")
    p.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV} or ./runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--t", type=int, help="number of augmented graphs")
    p.add_argument("--keep", type=float, help="fraction of edges kept in the observed graph")
    p.add_argument("--del-fraction", type=float)
    p.add_argument("--add-fraction", type=float)
    p.add_argument("--spurious-fraction", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--lam", type=float)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--layer-relu", action="store_true", default=None, help="ReLU after each propagation layer")
    p.add_argument("--relabel", action="store_true", default=None, help="map arbitrary node labels to dense ids")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (JSON value)")


def _resolve_config(args) -> dict:
    d: dict = {}
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{p}: config must be a JSON object")
        if d.get("dataset") and not Path(d["dataset"]).is_absolute():
            d["dataset"] = str(p.parent / d["dataset"])
    for flag, key in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    if args.layer_relu:
        d["layer_relu"] = True
    if args.relabel:
        d["relabel"] = True
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            d[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            d[key.strip()] = raw
    return d


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="linkrecon", description="Link reconstruction on observed graphs.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="split an edge list into observed and held-out edges")
    p.add_argument("edge_list")
    p.add_argument("--keep", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--relabel", action="store_true")

    p = sub.add_parser("train", help="train a model and evaluate it on the held-out edges")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    p.add_argument("--spurious-fraction", type=float, default=0.1)

    p = sub.add_parser("baseline", help="evaluate a heuristic (CN, RA, LP)")
    p.add_argument("kind")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="output JSON file or directory (default: print only)")
    p.add_argument("--epsilon", type=float, default=1e-3, help="weight of 3-paths in LP")
    p.add_argument("--spurious-fraction", type=float, default=0.1)

    p = sub.add_parser("sweep", help="train one model per lambda or depth value")
    p.add_argument("param", choices=sorted(SWEEP_KEYS))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--jobs", type=int, default=1)
    _add_run_flags(p)
    return parser


def _run(args) -> int:
    if args.command == "split":
        man = cmd_split(args.edge_list, args.keep, args.seed, args.out, args.relabel)
        print(_json(man), end="")
    elif args.command == "train":
        cfg = RunConfig.from_dict(_resolve_config(args))
        record = cmd_train(cfg)
        print(_json(record["metrics"]), end="")
    elif args.command == "eval":
        print(cmd_eval(args.checkpoint, args.manifest, args.out, args.spurious_fraction).to_json())
    elif args.command == "baseline":
        print(cmd_baseline(args.kind, args.manifest, args.out, args.epsilon, args.spurious_fraction).to_json())
    elif args.command == "sweep":
        base = _resolve_config(args)
        out = base.pop("output_dir", None)
        values = [v for v in args.values.split(",") if v.strip()]
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        records = cmd_sweep(args.param, values, base, out, args.jobs)
        print(f"{len(records)} runs")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse usage errors are configuration errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"linkrecon: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, GraphError, OSError) as exc:
        print(f"linkrecon: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, NonFiniteError, NotPositiveDefiniteError) as exc:
        print(f"linkrecon: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
