"""Command-line entry point: ``cope run | ablate | eval | config dump-defaults``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import agents
from .config import ConfigError, ExperimentConfig, apply_overrides, data_source, expand, load_config, preset
from .streams import DatasetMissingError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3

ABLATIONS = {
    "momentum": ("learner.momentum", [0.1, 0.9, 0.95, 0.99]),
    "ppp-terms": (None, ["full", "pos", "neg"]),
    "pseudo-proto": ("learner.include_pseudo_prototypes", [True, False]),
    "batch-size": ("stream.batch_size", [10, 20, 50, 100, 200]),
    "buffer-size": ("learner.memory_size", [100, 200, 500, 1000, 2000]),
}

_PPP_TERMS = {
    "full": {"attractor_enabled": True, "repellor_enabled": True},
    "pos": {"attractor_enabled": True, "repellor_enabled": False},
    "neg": {"attractor_enabled": False, "repellor_enabled": True},
}


def write_csv(path, rows: list[dict], fields: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in fields})


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _base_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise ConfigError("give either --config or --preset, not both")
    if args.config:
        if not Path(args.config).is_file():
            raise ConfigError(f"config file {args.config} not found")
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "split-mnist-balanced")
    cfg = apply_overrides(cfg, args.override)
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.out_dir is not None:
        cfg.out_dir = args.out_dir
    return cfg


def ablation_configs(base: ExperimentConfig, which: str) -> list[tuple[str, ExperimentConfig]]:
    if which not in ABLATIONS:
        raise ConfigError(f"unknown ablation axis {which!r}; choose from {sorted(ABLATIONS)}")
    key, values = ABLATIONS[which]
    out = []
    for v in values:
        if which == "ppp-terms":
            cfg = apply_overrides(base, [f"learner.{k}={json.dumps(b)}" for k, b in _PPP_TERMS[v].items()])
            label = v
        elif which == "pseudo-proto":
            cfg = apply_overrides(base, [f"{key}={json.dumps(v)}"])
            label = "incl" if v else "excl"
        else:
            cfg = apply_overrides(base, [f"{key}={json.dumps(v)}"])
            label = f"{v:g}" if isinstance(v, float) else str(v)
        cfg.name = f"{which}={label}"
        out.append((label, cfg))
    return out


def _run_rows(report: agents.ExperimentReport):
    timeline, losses, confusion = [], [], []
    for spec, res in report.runs:
        tag = {"name": spec.name, "variant": spec.variant, "setting": spec.setting, "seed": spec.seed}
        for seen, acc in res.timeline:
            timeline.append({**tag, "batches_seen": seen, "accuracy": acc})
        for seen, loss, pos in res.loss_timeline:
            losses.append({**tag, "batches_seen": seen, "mean_loss": loss, "pos_fraction": pos})
        for i, true in enumerate(res.classes):
            for j, pred in enumerate(res.classes):
                confusion.append({**tag, "true": true, "pred": pred, "count": res.confusion[i][j]})
    return timeline, losses, confusion


def emit(report: agents.ExperimentReport, out_dir, configs: dict, argv) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"configs": configs, **report.to_dict()}
    meta = {"timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), "argv": list(argv)}
    (out / "results.json").write_text(json.dumps({"meta": meta, "payload": payload}, indent=1, sort_keys=True))
    tag = ["name", "variant", "setting", "seed"]
    timeline, losses, confusion = _run_rows(report)
    write_csv(out / "timeline.csv", timeline, tag + ["batches_seen", "accuracy"])
    write_csv(out / "loss.csv", losses, tag + ["batches_seen", "mean_loss", "pos_fraction"])
    write_csv(out / "confusion.csv", confusion, tag + ["true", "pred", "count"])
    write_csv(out / "summary.csv", report.rows(), ["name", "setting", "variant", "mean", "std", "n", "best"])


def cmd_run(args) -> int:
    cfg = _base_config(args)
    specs = expand(cfg)
    report = agents.run_experiment(specs, jobs=args.jobs, cache_dir=args.cache_dir, checkpoint_dir=args.checkpoint_dir)
    emit(report, cfg.out_dir, {cfg.name: cfg.to_dict()}, sys.argv[1:])
    s = report.score(cfg.name)
    print(f"{cfg.name}: {s.mean:.2f} +- {s.std:.2f} (n={s.n}, best {report.best_setting(cfg.name)})")
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _base_config(args)
    cells = ablation_configs(base, args.which)
    specs = [s for _, cfg in cells for s in expand(cfg)]
    report = agents.run_experiment(specs, jobs=args.jobs, cache_dir=args.cache_dir)
    emit(report, base.out_dir, {cfg.name: cfg.to_dict() for _, cfg in cells}, sys.argv[1:])
    row = {"benchmark": base.name}
    for label, cfg in cells:
        s = report.score(cfg.name)
        row[label] = f"{s.mean:.2f} +- {s.std:.2f}"
    fields = ["benchmark"] + [label for label, _ in cells]
    write_csv(Path(base.out_dir) / f"ablation_{args.which}.csv", [row], fields)
    print(",".join(fields))
    print(",".join(row[f] for f in fields))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        predictor = agents.load_checkpoint(args.checkpoint)
    except (OSError, agents.CheckpointVersionError, KeyError, ValueError) as err:
        print(f"error: version mismatch or unreadable checkpoint: {err}", file=sys.stderr)
        return EXIT_CONFIG
    cfg = _base_config(args)
    _, test = agents.load_data(data_source(cfg))
    res = agents.evaluate(predictor, test)
    report = {
        "checkpoint": str(args.checkpoint),
        "accuracy": res.accuracy,
        "classes": res.classes,
        "recall": {str(k): v for k, v in res.recall.items()},
        "confusion": res.confusion.tolist(),
    }
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_dump_defaults(args) -> int:
    cfg = preset(args.preset) if args.preset else ExperimentConfig()
    print(json.dumps(cfg.to_dict(), indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cope", description="Continual prototype evolution experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--preset")
        sp.add_argument("--config")
        sp.add_argument("--seeds", type=int, help="run seeds 0..N-1")
        sp.add_argument("--jobs", type=int, default=1)
        sp.add_argument("--out-dir")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
        sp.add_argument("--cache-dir", help="reuse finished runs stored here")

    run = sub.add_parser("run", help="run an experiment")
    common(run)
    run.add_argument("--checkpoint-dir", help="save an evaluator checkpoint at every evaluation")
    run.set_defaults(func=cmd_run)

    abl = sub.add_parser("ablate", help="sweep one ablation axis")
    abl.add_argument("which", choices=sorted(ABLATIONS))
    common(abl)
    abl.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    common(ev)
    ev.set_defaults(func=cmd_eval)

    cfg = sub.add_parser("config", help="configuration utilities")
    cfg_sub = cfg.add_subparsers(dest="config_command", required=True)
    dump = cfg_sub.add_parser("dump-defaults")
    dump.add_argument("--preset")
    dump.set_defaults(func=cmd_dump_defaults)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetMissingError, FileNotFoundError) as err:
        print(f"dataset missing: {err}", file=sys.stderr)
        return EXIT_DATA
    except Exception as err:  # noqa: BLE001
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
