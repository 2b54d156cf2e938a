"""Command-line entry point: ``ustgcn {train,eval,synth,verify}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from importlib import metadata
from pathlib import Path

import numpy as np

from .dataset import (INCLUDE_PREDICTION_WINDOW, PREVIOUS_HOUR, ScalerParams, SpeedSeries, build_split_samples,
                      fit_scaler, generate_synthetic, load_speed_csv, make_splits, write_speed_csv)
from .graph import (NEIGHBORS_AND_SELF, SELF_ONLY, build_adjacency_gaussian_threshold, build_st_adjacency,
                    is_connected, load_graph, random_geometric_distances)
from .model import init_params, load_checkpoint, save_checkpoint
from .training import (TrainConfig, evaluate, historical_average_baseline, persistence_baseline,
                       predict_original, train)
from .verify import SUITES, run_suites

log = logging.getLogger("ustgcn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    """Bad configuration or input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# Options shared by the flag parser and the key=value config file
# ---------------------------------------------------------------------------


def _choice(*allowed):
    def parse(text):
        if text not in allowed:
            raise ValueError(f"must be one of {', '.join(allowed)}")
        return text
    return parse


def _boolean(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("must be true or false")


# key: (parser, default, help)
OPTIONS = {
    "speeds": (str, None, "speed CSV (rows are 5-minute steps, columns sensors)"),
    "distances": (str, None, "distance CSV of from_id,to_id,distance"),
    "adjacency": (_choice("threshold", "neighbor"), "threshold", "kernel rule for the physical graph"),
    "delta": (float, 0.1, "Gaussian kernel width"),
    "epsilon": (float, 0.5, "weight threshold for the threshold rule"),
    "normalize-distances": (_boolean, False, "z-score distances before the kernel"),
    "layers": (int, 3, "number of convolution layers K"),
    "history-days": (int, 7, "historical days P"),
    "window": (int, 12, "data window length T"),
    "window-mode": (_choice(INCLUDE_PREDICTION_WINDOW, PREVIOUS_HOUR), INCLUDE_PREDICTION_WINDOW,
                    "historical window alignment"),
    "variant": (_choice(NEIGHBORS_AND_SELF, SELF_ONLY), NEIGHBORS_AND_SELF, "lower-block content of A_ST"),
    "horizon": (int, 12, "forecast steps n"),
    "hidden": (int, 64, "hidden width of the predictor"),
    "epochs": (int, 500, "training epochs"),
    "batch": (int, 32, "mini-batch size"),
    "seed": (int, 0, "random seed"),
    "scaling": (_boolean, True, "z-score speeds with training statistics"),
    "synthetic": (_boolean, False, "generate a synthetic dataset instead of reading files"),
    "nodes": (int, 8, "synthetic sensor count"),
    "days": (int, 30, "synthetic days"),
}


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in OPTIONS:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_options(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then explicit flags. Every value is parsed and range-checked."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    for key in OPTIONS:
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            raw[key] = v
    opts = {}
    for key, (parse, default, _help) in OPTIONS.items():
        if key not in raw:
            opts[key] = default
            continue
        try:
            opts[key] = parse(raw[key]) if isinstance(raw[key], str) or parse is _boolean else raw[key]
        except ValueError as exc:
            raise UsageError(f"invalid value for {key!r}: {raw[key]!r} ({exc})") from None
    checks = [
        ("layers", opts["layers"] >= 0, "must be >= 0"),
        ("history-days", opts["history-days"] >= 0, "must be >= 0"),
        ("window", opts["window"] >= 1, "must be >= 1"),
        ("horizon", opts["horizon"] >= 1, "must be >= 1"),
        ("hidden", opts["hidden"] >= 1, "must be >= 1"),
        ("epochs", opts["epochs"] >= 0, "must be >= 0"),
        ("batch", opts["batch"] >= 1, "must be >= 1"),
        ("delta", opts["delta"] > 0, "must be positive"),
        ("epsilon", 0 <= opts["epsilon"] <= 1, "must lie in [0, 1]"),
        ("nodes", opts["nodes"] >= 2, "must be >= 2"),
        ("days", opts["days"] >= 1, "must be >= 1"),
    ]
    for key, ok, why in checks:
        if not ok:
            raise UsageError(f"invalid value for {key!r}: {opts[key]!r} ({why})")
    if opts["window-mode"] == INCLUDE_PREDICTION_WINDOW and opts["horizon"] > opts["window"]:
        raise UsageError(f"invalid value for 'horizon': {opts['horizon']} exceeds window {opts['window']} "
                         "in include-prediction-window mode")
    if not opts["synthetic"]:
        for key in ("speeds", "distances"):
            if not opts[key]:
                raise UsageError(f"missing value for {key!r} (or pass --synthetic)")
    return opts


def train_config(opts: dict) -> TrainConfig:
    return TrainConfig(epochs=opts["epochs"], batch_size=opts["batch"], K=opts["layers"], P=opts["history-days"],
                       T=opts["window"], n=opts["horizon"], window_mode=opts["window-mode"],
                       adjacency_variant=opts["variant"], h=opts["hidden"], seed=opts["seed"],
                       scaling=opts["scaling"])


def _add_option_flags(p: argparse.ArgumentParser, skip=()):
    for key, (parse, default, help_text) in OPTIONS.items():
        if key in skip or key in ("scaling", "synthetic", "normalize-distances"):
            continue
        p.add_argument(f"--{key}", dest=key.replace("-", "_"), default=None,
                       help=f"{help_text} (default {default})")
    p.add_argument("--synthetic", action="store_const", const=True, default=None,
                   help="generate data with the synthetic generator (uses --nodes, --days, --seed)")
    p.add_argument("--no-scaling", dest="scaling", action="store_const", const=False, default=None,
                   help="train on raw speeds")
    p.add_argument("--normalize-distances", action="store_const", const=True, default=None,
                   help="z-score distances before the kernel")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_synthetic(nodes: int, days: int, seed: int, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    triples = random_geometric_distances(nodes, seed)
    graph = build_adjacency_gaussian_threshold(triples, nodes, sensor_ids=tuple(f"s{i}" for i in range(nodes)))
    if not is_connected(graph):
        raise RuntimeError("synthetic layout produced a disconnected graph")
    series = generate_synthetic(graph, days, seed)
    speeds, dists = out / "speeds.csv", out / "distances.csv"
    write_speed_csv(series, speeds)
    with open(dists, "w") as fh:
        fh.write("from,to,distance\n")
        for i, j, d in triples:
            fh.write(f"{graph.sensor_ids[i]},{graph.sensor_ids[j]},{d!r}\n")
    return speeds, dists


def load_data(opts: dict):
    try:
        series = load_speed_csv(opts["speeds"])
        graph = load_graph(opts["distances"], opts["adjacency"], opts["delta"], opts["epsilon"],
                           sensor_ids=series.sensor_ids, normalize_distances=opts["normalize-distances"])
    except OSError as exc:
        raise UsageError(f"cannot read input: {exc}") from None
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return series, graph


def prepare(opts: dict, series: SpeedSeries, graph):
    cfg = train_config(opts)
    split = make_splits(series)
    sets = build_split_samples(series, split, cfg.T, cfg.n, cfg.P, cfg.window_mode)
    if len(sets["train"]) == 0:
        raise UsageError(f"no training samples: {series.n_days} days cannot supply {cfg.P} history days "
                         "inside the training split")
    scaler = fit_scaler(series, split) if cfg.scaling else ScalerParams.identity()
    adj = build_st_adjacency(graph, cfg.T, cfg.adjacency_variant)
    return cfg, split, sets, scaler, adj


def fingerprint(opts: dict, n_nodes: int, scaler: ScalerParams) -> dict:
    return {"N": n_nodes, "T": opts["window"], "d0": opts["history-days"] + 1, "K": opts["layers"],
            "h": opts["hidden"], "n": opts["horizon"], "P": opts["history-days"],
            "window_mode": opts["window-mode"], "variant": opts["variant"],
            "adjacency": opts["adjacency"], "delta": opts["delta"], "epsilon": opts["epsilon"],
            "normalize_distances": opts["normalize-distances"], "scaler": [scaler.mean, scaler.std]}


def write_predictions(path, samples, pred: np.ndarray) -> None:
    S, N, n = samples.y.shape
    anchor = np.repeat(samples.anchors, N * n)
    node = np.tile(np.repeat(np.arange(N), n), S)
    horizon = np.tile(np.arange(1, n + 1), S * N)
    table = np.column_stack([anchor, node, horizon, samples.y.reshape(-1), pred.reshape(-1)])
    np.savetxt(path, table, delimiter=",", fmt=["%d", "%d", "%d", "%.6f", "%.6f"],
               header="anchor,node,horizon,y,y_hat", comments="")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.from_manifest:
        manifest = json.loads(Path(args.from_manifest).read_text())
        opts = manifest["options"]
        for key, digest in manifest["digests"].items():
            if opts.get(key) and file_digest(opts[key]) != digest:
                raise UsageError(f"{key} file {opts[key]} does not match the manifest digest")
    else:
        opts = resolve_options(args)
    train_config(opts)  # range checks of the training fields
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if opts["synthetic"] and not args.from_manifest:
        speeds, dists = write_synthetic(opts["nodes"], opts["days"], opts["seed"], out / "data")
        opts = {**opts, "speeds": str(speeds.resolve()), "distances": str(dists.resolve()), "synthetic": False}
    series, graph = load_data(opts)
    cfg, split, sets, scaler, adj = prepare(opts, series, graph)

    manifest = {"version": _version(), "seed": cfg.seed, "options": opts, "train_config": asdict(cfg),
                "digests": {"speeds": file_digest(opts["speeds"]), "distances": file_digest(opts["distances"])},
                "split": asdict(split), "scaler": [scaler.mean, scaler.std],
                "outputs": {k: str(out / k) for k in
                            ("manifest", "run.log", "checkpoint", "metrics.csv", "predictions.csv")}}
    (out / "manifest").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("N=%d, %d/%d/%d train/val/test samples, %d epochs", series.n_nodes, len(sets["train"]),
             len(sets["val"]), len(sets["test"]), cfg.epochs)

    params = init_params(cfg.T, cfg.P + 1, cfg.K, cfg.h, cfg.n, cfg.seed)
    with open(out / "run.log", "w") as run_log:
        run_log.write("epoch,lr,train_mse,val_mae\n")

        def on_epoch(rec):
            run_log.write(f"{rec.epoch},{rec.lr!r},{rec.train_mse!r},{rec.val_mae!r}\n")
            run_log.flush()
            log.info("epoch %d lr %.2e train_mse %.5f val_mae %.4f", rec.epoch, rec.lr, rec.train_mse, rec.val_mae)

        result = train(params, adj, sets["train"], cfg, scaler, sets["val"], on_epoch=on_epoch)
    save_checkpoint(out / "checkpoint", result.params, fingerprint(opts, series.n_nodes, scaler))
    test = sets["test"]
    if len(test):
        report = evaluate(result.params, adj, test, scaler)
        (out / "metrics.csv").write_text(report.to_csv())
        write_predictions(out / "predictions.csv", test, predict_original(result.params, adj, test, scaler))
        print(report.format_table(f"test metrics (best epoch {result.best_epoch})"))
    else:
        log.warning("test split is empty; no metrics written")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        params, fp = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None
    opts = resolve_options(args) if not args.use_checkpoint_data else None
    if opts is None:
        manifest = json.loads((Path(args.checkpoint).parent / "manifest").read_text())
        opts = manifest["options"]
    # graph and window settings always come from the checkpoint
    opts = {**opts, "window": fp["T"], "layers": fp["K"], "hidden": fp["h"], "horizon": fp["n"],
            "history-days": fp["P"], "window-mode": fp["window_mode"], "variant": fp["variant"],
            "adjacency": fp["adjacency"], "delta": fp["delta"], "epsilon": fp["epsilon"],
            "normalize-distances": fp["normalize_distances"], "scaling": True}
    if opts.get("synthetic"):
        speeds, dists = write_synthetic(opts["nodes"], opts["days"], opts["seed"], Path(args.checkpoint).parent / "eval-data")
        opts = {**opts, "speeds": str(speeds), "distances": str(dists)}
    series, graph = load_data(opts)
    data_fp = {"N": series.n_nodes, "T": fp["T"], "d0": fp["d0"]}
    expected = {"N": fp["N"], "T": fp["T"], "d0": fp["d0"]}
    if data_fp != expected:
        raise UsageError(f"checkpoint fingerprint {expected} does not match data fingerprint {data_fp}")
    scaler = ScalerParams(*fp["scaler"])
    cfg, split, sets, _, adj = prepare(opts, series, graph)
    samples = sets[args.split]
    if len(samples) == 0:
        raise UsageError(f"split {args.split!r} has no samples")
    report = evaluate(params, adj, samples, scaler)
    print(report.format_table(f"model ({args.split}, {len(samples)} samples)"))
    text = report.to_csv()
    for name in args.baseline or []:
        base = persistence_baseline(samples) if name == "persistence" else historical_average_baseline(samples)
        print()
        print(base.format_table(f"{name} baseline"))
        text += f"# {name}\n" + base.to_csv()
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval-{args.split}.csv"
    out.write_text(text)
    return EXIT_OK


def cmd_synth(args) -> int:
    if args.nodes < 2:
        raise UsageError(f"invalid value for 'nodes': {args.nodes} (must be >= 2)")
    if args.days < 1:
        raise UsageError(f"invalid value for 'days': {args.days} (must be >= 1)")
    speeds, dists = write_synthetic(args.nodes, args.days, args.seed, args.out)
    print(f"{speeds}  sha256 {file_digest(speeds)}")
    print(f"{dists}  sha256 {file_digest(dists)}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        results = run_suites(args.suite, seed=args.seed, scale=args.scale,
                             corrupt_normalization=args.corrupt_normalization)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} suites passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    return EXIT_VERIFY if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ustgcn", description="Unified spatio-temporal GCN traffic forecasting")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write run artifacts")
    t.add_argument("--config", help="flat key=value file; flags override it")
    t.add_argument("--from-manifest", help="rerun exactly the options recorded in a manifest")
    t.add_argument("--out", required=True, help="output directory")
    _add_option_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a data split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--baseline", action="append", choices=("persistence", "ha"),
                   help="also report a baseline (repeatable)")
    e.add_argument("--use-checkpoint-data", action="store_true",
                   help="reuse the data files recorded in the run manifest")
    e.add_argument("--out", help="metrics CSV path (default next to the checkpoint)")
    _add_option_flags(e, skip=("layers", "history-days", "window", "window-mode", "variant", "horizon",
                               "hidden", "epochs", "batch", "adjacency", "delta", "epsilon"))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("synth", help="write a synthetic speed/distance dataset")
    s.add_argument("--nodes", type=int, default=8)
    s.add_argument("--days", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    v = sub.add_parser("verify", help="run the invariant suites")
    v.add_argument("--suite", action="append", choices=sorted(SUITES), help="run only this suite (repeatable)")
    v.add_argument("--scale", type=float, default=1.0, help="multiplier on the number of random cases")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--corrupt-normalization", action="store_true",
                   help="negative control: perturb one normalized entry so the oracle suite must fail")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
