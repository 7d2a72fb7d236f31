# -*- coding: utf-8 -*-
"""
Main entry point for ICL Forge.

    python main.py gen-data --kind gaussian --classes 1600 --per-class 20 --dim 32 --out store.exb1
    python main.py train configs/desk-scale.toml [--resume]
    python main.py train --profile paper-defaults
    python main.py eval runs/desk-scale --suite icl:2:4
    python main.py probe runs/desk-scale [--export-traces 4]
    python main.py ngram tokens.u32 --ns 1,5,20
    python main.py sweep configs/recipe-sweep.toml

Exit codes: 0 ok, 2 config, flags or shapes, 3 I/O or file format, 4 numeric abort,
5 hash mismatch, 6 sweep child failure. Diagnostics go to stderr; stdout
carries one summary line per result.
"""
import argparse
import csv
import io
import sys
try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.data.profiles import get_profiles_summary
from src.models.checkpoint import load_checkpoint
from src.models.config import EvalTask, SyntheticSpec, load_experiment_config
from src.modules.evaluator import evaluate_icl, evaluate_iwl
from src.modules.exemplar_store import (
    apply_sample_budget,
    gen_synthetic_store,
    import_pgm_dir,
    instance_relabel,
    save_store,
    split_holdout,
)
from src.modules.ngram import DEFAULT_NS, DEFAULT_WINDOW, FORMATS, read_token_stream, report
from src.modules.probe import METRICS, capture_traces, export_trace, prev_token_score_series, summarize_suite
from src.modules.progress_tracker import MetricLog
from src.modules.sequence_forge import load_suite, make_icl_suite, make_iwl_suite
from src.models.episode import KIND_IWL
from src.pipeline.sweep import run_sweep
from src.pipeline.training_run import (
    PROBE_SUITE,
    list_checkpoints,
    load_run_store,
    read_manifest,
    train_run,
)
from src.utils.errors import ConfigError, HashMismatchError, IclForgeError
from src.utils.logging_utils import configure_logging, get_logger

logger = get_logger("cli")

KIND_ALIASES = {
    "gaussian": "gaussian-prototype",
    "gaussian-prototype": "gaussian-prototype",
    "glyph": "procedural-glyph",
    "procedural-glyph": "procedural-glyph",
}


def emit(**fields):
    """One machine-readable summary line on stdout."""
    print(" ".join(f"{k}={v}" for k, v in fields.items()), flush=True)


def parse_pair(text: str, sep: str) -> tuple:
    try:
        a, b = text.lower().split(sep)
        return int(a), int(b)
    except ValueError as exc:
        raise ConfigError(f"expected two integers separated by {sep!r}, got {text!r}") from exc


def parse_overrides(items: Optional[List[str]]) -> Dict[str, Any]:
    """--set key=value; values are parsed as TOML, falling back to plain strings."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            out[key.strip()] = raw
    return out


# =========================================================
# COMMANDS
# =========================================================

def cmd_gen_data(args) -> int:
    if args.import_dir:
        store = import_pgm_dir(args.import_dir)
    else:
        kind = KIND_ALIASES.get(args.kind)
        if kind is None:
            raise ConfigError(f"unknown store kind {args.kind!r}")
        spec = SyntheticSpec(
            n_classes=args.classes,
            n_exemplars=args.per_class,
            kind=kind,
            vector_dim=args.dim,
            raster_size=parse_pair(args.size, "x"),
            noise=args.noise,
            seed=args.seed,
        )
        store = gen_synthetic_store(spec)
    if args.n_novel is not None:
        store = split_holdout(store, args.n_novel, parse_pair(args.split, ","), args.split_seed)
    if args.budget is not None:
        store = apply_sample_budget(store, args.budget, args.zipf)
    if args.instance_relabel:
        store = instance_relabel(store)
    save_store(store, args.out)
    s = store.summary()
    emit(out=args.out, classes=s["classes"], exemplars=s["exemplars"], kind=s["kind"],
         shape=s["shape"], hash=s["hash"])
    return 0


def cmd_train(args) -> int:
    overrides = parse_overrides(args.set)
    if args.profile:
        overrides = {"profile": args.profile, **overrides}
    if not (args.config or args.profile):
        raise ConfigError("train needs a config file or --profile")
    config = load_experiment_config(args.config, overrides)
    result = train_run(config, args.out, resume=args.resume)
    emit(run_dir=result.run_dir, seeds=",".join(str(s.seed) for s in result.seeds),
         metrics=result.metrics_path, aggregate=result.aggregate_path)
    return 0


def _resolve_suite(run_dir: Path, manifest: Dict[str, Any], store, spec: str):
    """A suite file path, or a task string ('icl:2:4', '2w4s', 'iwl') rebuilt from the run config."""
    path = Path(spec)
    if path.suffix == ".icls" or path.exists():
        suite = load_suite(path, store)
        if suite.store_hash and suite.store_hash != manifest["store_hash"]:
            raise HashMismatchError(f"suite {path} was not built on this run's store")
        return suite
    cfg = manifest["config"]
    pairs = manifest["model"]["pairs"]
    if spec.strip().lower() == "iwl":
        return make_iwl_suite(store, cfg["eval"]["suite_size"], cfg["eval"]["suite_seed"], pairs)
    task = EvalTask.parse(spec)
    return make_icl_suite(store, task, cfg["eval"]["suite_size"], cfg["eval"]["suite_seed"], pairs)


def _checkpoints(run_dir: Path, manifest: Dict[str, Any], checkpoint: Optional[str],
                 seed: Optional[int], every: bool) -> List[Path]:
    if checkpoint:
        return [Path(checkpoint)]
    seeds = [seed] if seed is not None else manifest["config"]["train"]["seeds"]
    out = []
    for s in seeds:
        found = list_checkpoints(run_dir / f"seed-{s}")
        if not found:
            raise ConfigError(f"no checkpoints for seed {s} in {run_dir}")
        out += found if every else found[-1:]
    return out


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    store = load_run_store(run_dir, manifest)
    suite = _resolve_suite(run_dir, manifest, store, args.suite)
    restrict = not args.full_vocab
    log = MetricLog(run_dir / "metrics.csv", monotone=False)
    for path in _checkpoints(run_dir, manifest, args.checkpoint, args.seed, every=False):
        ckpt = load_checkpoint(path)
        if suite.kind == KIND_IWL:
            result = evaluate_iwl(ckpt.model, store, suite)
        else:
            result = evaluate_icl(ckpt.model, store, suite, restrict=restrict)
        seed = int(ckpt.meta.get("seed", 0))
        log.append(ckpt.step, seed, result.split, result.accuracy)
        emit(split=result.split, seed=seed, step=ckpt.step, accuracy=repr(result.accuracy),
             correct=result.correct, total=result.total)
    return 0


def cmd_probe(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = read_manifest(run_dir)
    store = load_run_store(run_dir, manifest)
    if args.suite:
        suite = _resolve_suite(run_dir, manifest, store, args.suite)
    elif PROBE_SUITE in manifest["suites"]:
        suite = load_suite(run_dir / manifest["suites"][PROBE_SUITE]["file"], store)
    else:
        suite = _resolve_suite(run_dir, manifest, store, manifest["config"]["probe"]["task"])
    episodes = list(suite.episodes)[:args.episodes] if args.episodes else list(suite.episodes)

    paths = _checkpoints(run_dir, manifest, args.checkpoint, args.seed, every=True)
    by_seed: Dict[int, list] = {}
    for path in paths:
        ckpt = load_checkpoint(path)
        by_seed.setdefault(int(ckpt.meta.get("seed", 0)), []).append(ckpt)

    out_dir = Path(args.out or run_dir / "probe")
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "seed", "layer", "head", "metric", "value"])
        for seed, ckpts in sorted(by_seed.items()):
            for ckpt in sorted(ckpts, key=lambda c: c.step):
                metrics = summarize_suite(ckpt.model, store, episodes, args.pre_softmax, args.all_image_mass)
                for metric in METRICS:
                    if metric not in metrics.values:
                        continue
                    values = metrics.values[metric]
                    for l in range(values.shape[0]):
                        for h in range(values.shape[1]):
                            writer.writerow([ckpt.step, seed, l, h, metric, repr(float(values[l, h]))])
                    emit(seed=seed, step=ckpt.step, metric=metric, max=repr(metrics.overall_max(metric)))
    with open(out_dir / "head-series.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "seed", "layer", "head", "score"])
        for seed, ckpts in sorted(by_seed.items()):
            series = prev_token_score_series(ckpts, store, episodes)
            for i, step in enumerate(series.steps):
                for l in range(series.scores.shape[1]):
                    for h in range(series.scores.shape[2]):
                        writer.writerow([step, seed, l, h, repr(float(series.scores[i, l, h]))])
    if args.export_traces:
        for seed, ckpts in sorted(by_seed.items()):
            last = max(ckpts, key=lambda c: c.step)
            _, traces = capture_traces(last.model, store, episodes[:args.export_traces], args.pre_softmax)
            for i, trace in enumerate(traces):
                export_trace(trace, out_dir / "traces" / f"seed-{seed}" / f"step-{last.step}" / f"episode-{i}")
    emit(probe_dir=out_dir, checkpoints=len(paths))
    return 0


def cmd_ngram(args) -> int:
    try:
        ns = [int(n) for n in args.ns.split(",") if n.strip()]
    except ValueError as exc:
        raise ConfigError(f"--ns expects comma-separated integers, got {args.ns!r}") from exc
    stream = read_token_stream(args.tokens, args.format)
    result = report(stream, window=args.window, ns=ns, stride=args.stride)
    if args.out:
        path = result.save(args.out)
        emit(report=path, tokens=len(stream), rows=len(result.rows))
    else:
        sys.stdout.write(result.to_csv())
    return 0


def cmd_sweep(args) -> int:
    config = load_experiment_config(args.config, parse_overrides(args.set))
    children = run_sweep(config, args.out, resume=args.resume)
    for c in children:
        emit(child=c.name, run_dir=c.run_dir, status="ok")
    return 0


def cmd_profiles(args) -> int:
    for p in get_profiles_summary():
        emit(id=p["id"], steps=p["steps"], layers=p["layers"], aliases=",".join(p["aliases"]) or "-")
    return 0


# =========================================================
# ARGUMENTS
# =========================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iclforge", description="In-context learning laboratory")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: ICLFORGE_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate or import an exemplar store")
    p.add_argument("--kind", default="gaussian", help="gaussian | glyph")
    p.add_argument("--classes", type=int, default=1623)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--size", default="28x28", help="raster size HxW")
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--import-dir", help="directory of class subdirectories holding P5 images")
    p.add_argument("--n-novel", type=int, help="hold out this many novel classes")
    p.add_argument("--split", default="18,2", help="per-class train,validation counts")
    p.add_argument("--split-seed", type=int, default=42)
    p.add_argument("--budget", type=int, help="total train exemplars kept")
    p.add_argument("--zipf", type=float, default=1.0, help="Zipf coefficient of the budget")
    p.add_argument("--instance-relabel", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train every seed of an experiment")
    p.add_argument("config", nargs="?", help="TOML experiment file")
    p.add_argument("--profile", help="base profile id (overrides the file's profile key)")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", help="run directory (default: output_dir)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints on a suite")
    p.add_argument("run_dir")
    p.add_argument("--suite", required=True, help="suite file, or icl:K:N / KwNs / iwl")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--full-vocab", action="store_true", help="argmax over every label")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("probe", help="induction-head metrics over checkpoints")
    p.add_argument("run_dir")
    p.add_argument("--suite")
    p.add_argument("--checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--episodes", type=int, default=0, help="use only the first N suite episodes")
    p.add_argument("--pre-softmax", action="store_true")
    p.add_argument("--all-image-mass", action="store_true")
    p.add_argument("--export-traces", type=int, default=0, metavar="N")
    p.add_argument("--out")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ngram", help="n-gram repetitions per token window")
    p.add_argument("tokens")
    p.add_argument("--format", default=FORMATS[0], choices=FORMATS)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--ns", default=",".join(str(n) for n in DEFAULT_NS))
    p.add_argument("--stride", type=int, help="window stride (default: window, non-overlapping)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ngram)

    p = sub.add_parser("sweep", help="one run per grid point")
    p.add_argument("config")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("profiles", help="list predefined profiles")
    p.set_defaults(func=cmd_profiles)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level.upper() if args.log_level else None)
    try:
        return args.func(args)
    except IclForgeError as exc:
        logger.error(f"❌ {exc}")
        return exc.exit_code
    except OSError as exc:
        logger.error(f"❌ I/O error: {exc}")
        return 3
    except ValueError as exc:
        logger.error(f"❌ {exc}")
        return 2


if __name__ == "__main__":
    # Fix Windows console encoding
    if sys.stdout.encoding.lower() != 'utf-8':
        sys.stdout = io.TextIOWrapper(sys.stdout.buffer, encoding='utf-8', errors='replace')
        sys.stderr = io.TextIOWrapper(sys.stderr.buffer, encoding='utf-8', errors='replace')
    sys.exit(main())
