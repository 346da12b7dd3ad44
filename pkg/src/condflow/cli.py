"""Command-line entry point: generate-data, train, evaluate, ablate."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .experiments import (
    DatasetMissing,
    evaluate_model,
    generate_datasets,
    load_datasets,
    run_experiment,
    write_wide_table,
)
from .flows.model import ArchitectureMismatch, load_checkpoint
from .trainer import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("condflow")


def _load_config(path: str, overrides: list[str], seed: int | None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(path, overrides)
    if seed is not None:
        cfg.sections["experiment"]["seed"] = seed
    root = os.environ.get("CONDFLOW_OUTPUT_ROOT")
    if root:
        for key in ("output_dir", "data_dir"):
            p = Path(cfg.get("experiment", key))
            if not p.is_absolute():
                cfg.sections["experiment"][key] = str(Path(root) / p)
    return cfg


def cmd_generate_data(args) -> int:
    cfg = _load_config(args.config, args.override, args.seed)
    torch.set_num_threads(cfg.get("experiment", "threads"))
    generate_datasets(cfg)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.override, args.seed)
    summary = run_experiment(cfg, generate_if_missing=False)
    print(f"finished {summary['steps']} steps; best validation NLL {summary['best_val_nll']!r}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config, args.override, args.seed)
    torch.set_num_threads(cfg.get("experiment", "threads"))
    from .experiments import arch_dict

    model = load_checkpoint(args.checkpoint, expected_arch=arch_dict(cfg))
    datasets = load_datasets(cfg)
    rm = evaluate_model(cfg, model, datasets)
    out_dir = Path(args.output or cfg.get("experiment", "output_dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    rm.write_csv(out_dir / "metrics.csv")
    rm.write_json(out_dir / "metrics.json")
    write_wide_table(rm, out_dir / "table.csv")
    for r in rm.rows:
        print(f"{r['metric']}@{r['condition']!r} = {r['value']!r}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    import configparser

    parser = configparser.ConfigParser()
    parser.optionxform = str
    parser.read(args.sweep)
    if not parser.has_section("sweep"):
        print("error: sweep config needs a [sweep] section", file=sys.stderr)
        return EXIT_CONFIG
    configs = [c.strip() for c in parser.get("sweep", "configs").split(",") if c.strip()]
    seeds = [int(s) for s in parser.get("sweep", "seeds", fallback="1, 2, 3").split(",")]
    out_path = Path(parser.get("sweep", "output", fallback="ablation.csv"))
    if not configs:
        print("error: empty sweep list", file=sys.stderr)
        return EXIT_CONFIG

    rows = []
    all_cols: list[str] = []
    for cpath in configs:
        name = Path(cpath).stem
        per_seed: list[dict] = []
        failed = False
        for seed in seeds:
            try:
                cfg = _load_config(cpath, args.override, seed)
                cfg.sections["experiment"]["output_dir"] = str(
                    Path(cfg.get("experiment", "output_dir")) / f"seed{seed}"
                )
                summary = run_experiment(cfg, generate_if_missing=True)
                cols = {}
                for r in summary["metrics"].rows:
                    cols[f"{r['metric']}@{r['condition']!r}"] = r["value"]
                per_seed.append(cols)
            except Exception as exc:  # partial failures recorded, sweep continues
                logger.error("run %s seed %d failed: %s", name, seed, exc)
                failed = True
        if per_seed:
            keys = list(per_seed[0].keys())
            for k in keys:
                if k not in all_cols:
                    all_cols.append(k)
            agg = {"row": name, "status": "UNSTABLE" if failed else "ok"}
            for k in keys:
                vals = np.array([p[k] for p in per_seed if k in p])
                agg[k] = f"{vals.mean()!r}"
                agg[f"{k}_std"] = f"{vals.std(ddof=1) if len(vals) > 1 else 0.0!r}"
            rows.append(agg)
        else:
            rows.append({"row": name, "status": "UNSTABLE"})
    header = ["row", "status"]
    for k in all_cols:
        header += [k, f"{k}_std"]
    with open(out_path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(row.get(h, "")) for h in header) + "\n")
    print(f"wrote {out_path}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    ap = argparse.ArgumentParser(prog="condflow")
    sub = ap.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="override the experiment seed")
    common.add_argument(
        "--override",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override a config value (repeatable)",
    )

    sub.add_parser("generate-data", parents=[common]).set_defaults(fn=cmd_generate_data)
    sub.add_parser("train", parents=[common]).set_defaults(fn=cmd_train)
    pe = sub.add_parser("evaluate", parents=[common])
    pe.add_argument("--checkpoint", required=True)
    pe.add_argument("--output", default=None)
    pe.set_defaults(fn=cmd_evaluate)
    pa = sub.add_parser("ablate")
    pa.add_argument("--sweep", required=True, help="sweep config file")
    pa.add_argument("--override", action="append", default=[])
    pa.set_defaults(fn=cmd_ablate)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: CONFIG: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetMissing, FileNotFoundError) as exc:
        print(f"error: DatasetMissing: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArchitectureMismatch as exc:
        print(f"error: ArchitectureMismatch: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, FloatingPointError) as exc:
        print(f"error: NUMERIC: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
