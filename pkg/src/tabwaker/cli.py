"""Command-line experiment runner: run, sweep, eval, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from tabwaker import __version__
from tabwaker.config import (
    ConfigError,
    config_hash,
    load_config,
    plan_runs,
    resolved_to_configs,
)
from tabwaker.envs import build_family
from tabwaker.evaluation import OptimalValueCache, bound_fuzz, evaluate_checkpoint
from tabwaker.trainer import Checkpoint, run

log = logging.getLogger("tabwaker")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_BOUNDS = 0, 1, 2, 3
# lower is better for every compared metric
WIN_METRICS = (("train", "cvar_regret"), ("train", "mean_regret"), ("ood", "mean_regret"))


class RunFailure(RuntimeError):
    pass


# -- run / sweep ----------------------------------------------------------------


def execute_run(spec, cfg) -> Path:
    resolved = spec.resolved(cfg)
    family_cfg, sampler, trainer, exploration, model, _ = resolved_to_configs(resolved)
    family = build_family(family_cfg)
    run_dir = Path(spec.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    result = run(family, sampler, trainer, exploration, model, out_dir=run_dir)
    manifest = {
        "name": spec.name,
        "strategy": sampler.strategy,
        "seed": spec.seed,
        "config_hash": config_hash(resolved),
        "family_hash": family.definition_hash(),
        "family": family.definition,
        "checkpoints": [c.episode for c in result.checkpoints],
        "version": __version__,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return run_dir


def _run_all(specs, cfg, jobs: int) -> None:
    if jobs <= 1:
        for spec in specs:
            log.info("run %s seed %d -> %s", spec.name, spec.seed, spec.run_dir)
            execute_run(spec, cfg)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(execute_run, spec, cfg) for spec in specs]
        for fut in futures:
            log.info("finished %s", fut.result())


def cmd_run(args, sweep: bool = False) -> int:
    cfg = load_config(args.config)
    if args.out:
        cfg.output = args.out
    if args.seeds:
        cfg.seeds = args.seeds
    specs = plan_runs(cfg, sweep=sweep)
    existing = [s.run_dir for s in specs if Path(s.run_dir).exists() and any(Path(s.run_dir).iterdir())]
    if existing and not args.overwrite:
        raise ConfigError(f"run directory {existing[0]} already exists; pass --overwrite to replace it")
    for d in existing:
        shutil.rmtree(d)
    try:
        Path(cfg.output).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {cfg.output} is not writable: {exc}") from None
    _run_all(specs, cfg, args.jobs)
    for spec in specs:
        print(spec.run_dir)
    return EXIT_OK


# -- eval -------------------------------------------------------------------------


def select_checkpoints(paths: list, selector: str) -> list:
    paths = sorted(paths)
    if not paths:
        raise RunFailure("no checkpoints found")
    if selector == "all":
        return paths
    if selector == "latest":
        return paths[-1:]
    if selector.startswith("every-"):
        k = int(selector.removeprefix("every-"))
        if k < 1:
            raise ConfigError("every-k needs k >= 1")
        return paths[k - 1::k]
    if selector.isdigit():
        chosen = [p for p in paths if int(p.stem.split("_")[1]) == int(selector)]
        if not chosen:
            raise RunFailure(f"no checkpoint at episode {selector}")
        return chosen
    raise ConfigError(f"unknown checkpoint selector {selector!r}")


def evaluate_run(run_dir, selector: str = "latest") -> list:
    run_dir = Path(run_dir)
    try:
        resolved = json.loads((run_dir / "config.json").read_text())
    except OSError as exc:
        raise RunFailure(f"{run_dir} is not a run directory: {exc}") from None
    family_cfg, _, trainer, _, _, eval_cfg = resolved_to_configs(resolved)
    family = build_family(family_cfg)
    optimal = OptimalValueCache(family, eval_cfg.vi_tol)
    written = []
    for path in select_checkpoints(list((run_dir / "checkpoints").glob("ckpt_*.npz")), selector):
        ckpt = Checkpoint.load(path)
        # same evaluation draws for every run sharing a seed (paired comparison)
        rng = np.random.default_rng([eval_cfg.seed, trainer.seed])
        report = evaluate_checkpoint(ckpt, family, eval_cfg, rng, optimal)
        out = run_dir / "eval" / path.stem
        report.write(out)
        written.append(out)
    return written


def cmd_eval(args) -> int:
    for run_dir in args.run_dirs:
        for out in evaluate_run(run_dir, args.checkpoint):
            print(out)
    return EXIT_OK


# -- report -----------------------------------------------------------------------


def read_summary(path) -> dict:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["checkpoint", "task", "split", "metric", "value"]:
            raise RunFailure(f"{path}: incompatible summary schema")
        for row in reader:
            out[(row["task"], row["split"], row["metric"])] = float(row["value"])
    return out


def sampling_heatmap(steps_csv, param_labels: list, buckets: int) -> list:
    """Rows of (bucket, first_episode, last_episode, count per theta)."""
    with open(steps_csv, newline="", encoding="utf-8") as fh:
        drawn = [(int(r["episode"]), r["theta"]) for r in csv.DictReader(fh)]
    n = len(drawn)
    edges = np.linspace(0, n, buckets + 1).round().astype(int)
    rows = []
    for b in range(buckets):
        chunk = drawn[edges[b]:edges[b + 1]]
        counts = dict.fromkeys(param_labels, 0)
        for _, label in chunk:
            counts[label] += 1
        first = chunk[0][0] if chunk else ""
        last = chunk[-1][0] if chunk else ""
        rows.append([b, first, last, *counts.values()])
    return rows


def build_report(run_dirs, out_dir, buckets: int = 10) -> dict:
    runs = []
    for d in map(Path, run_dirs):
        try:
            manifest = json.loads((d / "manifest.json").read_text())
        except OSError:
            raise RunFailure(f"{d}: missing manifest.json") from None
        evals = sorted((d / "eval").glob("ckpt_*/summary.csv"))
        if not evals:
            raise RunFailure(f"{d}: no evaluated checkpoints; run `eval` first")
        runs.append((d, manifest, read_summary(evals[-1])))
    if len({m["family_hash"] for _, m, _ in runs}) > 1:
        raise RunFailure("runs use different family definitions; refusing to merge")

    out_dir = Path(out_dir)
    (out_dir / "heatmaps").mkdir(parents=True, exist_ok=True)
    grouped = defaultdict(list)
    for _, m, summary in runs:
        grouped[m["name"]].append((m["seed"], summary))
    keys = sorted({k for _, _, s in runs for k in s})

    with open(out_dir / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "split", "metric", "strategy", "mean", "std", "n_seeds"])
        for key in keys:
            for name in sorted(grouped):
                vals = [s[key] for _, s in grouped[name] if key in s]
                if vals:
                    w.writerow([*key, name, repr(float(np.mean(vals))), repr(float(np.std(vals))), len(vals)])

    baseline = dict(grouped.get("dr", []))
    win_rows = []
    for name in sorted(grouped):
        if name == "dr" or not baseline:
            continue
        pairs = [(s, baseline[seed]) for seed, s in grouped[name] if seed in baseline]
        tasks = sorted({k[0] for k in keys if k[0]})
        compared = [(t, sp, m) for t in tasks for sp, m in WIN_METRICS] + [("", "train", "max_wm_error")]
        for key in compared:
            valid = [(a[key], b[key]) for a, b in pairs if key in a and key in b]
            if valid:
                win_rows.append([name, *key, sum(a < b for a, b in valid), len(valid)])
    with open(out_dir / "wins_vs_dr.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy", "task", "split", "metric", "wins", "n_pairs"])
        w.writerows(win_rows)

    for d, m, _ in runs:
        family = build_family(m["family"])
        labels = [t.label for t in family.param_grid]
        with open(out_dir / "heatmaps" / f"{m['name']}_seed{m['seed']}.csv", "w",
                  newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bucket", "first_episode", "last_episode", *labels])
            w.writerows(sampling_heatmap(d / "steps.csv", labels, buckets))
    return {"runs": len(runs), "strategies": sorted(grouped), "wins": win_rows}


def cmd_report(args) -> int:
    if args.run_dirs:
        info = build_report(args.run_dirs, args.out, args.buckets)
        print(f"merged {info['runs']} runs ({', '.join(info['strategies'])}) into {args.out}")
    if args.verify_bounds:
        summary = bound_fuzz(args.fuzz_instances, rng=np.random.default_rng(args.fuzz_seed))
        print(
            f"bound fuzz: {summary.n_instances} instances, "
            f"lemma violations {summary.lemma_violations}, prop1 violations {summary.prop1_violations}, "
            f"worst slack {min(summary.worst_lemma_slack, summary.worst_prop1_slack):.3e}"
        )
        if not summary.passed:
            return EXIT_BOUNDS
    elif not args.run_dirs:
        raise ConfigError("report needs run directories or --verify-bounds")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------


def _seed_list(text: str) -> list:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabwaker", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("run", "train every (strategy, seed) in the config"),
                            ("sweep", "train the sweep grid (eta / p_dr / strategy) x seeds")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True)
        p.add_argument("--out", help="override the config's output directory")
        p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds overriding the config")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("eval", help="evaluate checkpoints of finished runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--checkpoint", default="latest", help="all | latest | every-K | EPISODE")

    p = sub.add_parser("report", help="merge evaluated runs into comparison tables")
    p.add_argument("run_dirs", nargs="*")
    p.add_argument("--out", default="report")
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--verify-bounds", action="store_true")
    p.add_argument("--fuzz-instances", type=int, default=1000)
    p.add_argument("--fuzz-seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "sweep":
            return cmd_run(args, sweep=True)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RunFailure, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
