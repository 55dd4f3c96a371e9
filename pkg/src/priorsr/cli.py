"""Command-line entry point.

    priorsr degrade        --out DATA (--hr-dir SRC | --toy-sources N) [--n N]
    priorsr train-base     --data DATA --out RUN
    priorsr train-control  --data DATA --base CKPT --out RUN
    priorsr restore        LR --ckpt CKPT --out DIR [--seed --steps --guidance --no-negative ...]
    priorsr evaluate       --sr-dir SR --hr-dir HR --out DIR
    priorsr ablate-fusion  --data DATA --base CKPT --out DIR
    priorsr ablate-dfc     --data DATA --base CKPT --out DIR

Every command accepts ``--config FILE`` plus trailing ``key=value`` overrides
and writes the resolved configuration to its output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .core import RunConfig, parse_kv
from .degrade import DegradationRanges, build_dataset, load_dataset, make_toy_sources
from .training import load_model, run_dir_from_env, train_base, train_control


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("overrides", nargs="*", metavar="key=value")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="priorsr", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="synthesize LR/HR pairs")
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--hr-dir")
    src.add_argument("--toy-sources", type=int, metavar="N", help="generate N procedural HR sources")
    p.add_argument("--n", type=int, help="number of pairs (default: n_pairs)")
    _common(p)

    for name in ("train-base", "train-control"):
        p = sub.add_parser(name)
        p.add_argument("--data", required=True)
        p.add_argument("--out", help=f"run directory (default: $PRIORSR_RUN_DIR or ./runs/{name})")
        p.add_argument("--resume", help="checkpoint directory to resume from")
        if name == "train-control":
            p.add_argument("--base", required=True, help="base-stage checkpoint directory")
        _common(p)

    p = sub.add_parser("restore")
    p.add_argument("lr", help="LR PNG or directory of PNGs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--no-negative", action="store_true")
    p.add_argument("--prompt-source", choices=("stub", "mllm", "cache"), default="stub")
    p.add_argument("--mllm-url")
    p.add_argument("--init-from-lr", action="store_true")
    _common(p)

    p = sub.add_parser("evaluate")
    p.add_argument("--sr-dir", required=True)
    p.add_argument("--hr-dir", required=True)
    p.add_argument("--out", required=True)
    _common(p)

    for name in ("ablate-fusion", "ablate-dfc"):
        p = sub.add_parser(name)
        p.add_argument("--data", required=True)
        p.add_argument("--base", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--guidance", type=float)
        _common(p)
    return ap


def resolve_config(args, base: RunConfig | None = None) -> RunConfig:
    """--config file (or ``base``, or defaults), then key=value overrides, then --seed."""
    if args.config:
        values = parse_kv(Path(args.config).read_text().splitlines())
    elif base is not None:
        values = parse_kv(base.dumps().splitlines())
    else:
        values = {}
    values.update(parse_kv(args.overrides))
    cfg = RunConfig.from_strings(values)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def cmd_degrade(args) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    hr_dir = args.hr_dir
    if args.toy_sources is not None:
        hr_dir = out / "sources"
        make_toy_sources(hr_dir, args.toy_sources, cfg.hr_size, cfg.seed)
    n = cfg.n_pairs if args.n is None else args.n
    ranges = DegradationRanges.for_sr_factor(cfg.sr_factor, sinc=cfg.final_sinc)
    manifest = build_dataset(hr_dir, out, n, ranges, cfg.seed, cfg.hr_size, cfg.sr_factor)
    cfg.save(out / "config.cfg")
    return {"pairs": len(manifest["pairs"]), "out": str(out)}


def _lr_paths(data: Path):
    return sorted((data / "lr").glob("*.png"))


def cmd_train_base(args) -> dict:
    cfg = resolve_config(args)
    run = Path(args.out) if args.out else run_dir_from_env("runs/train-base")
    data = Path(args.data)
    _, reports = train_base(load_dataset(data), cfg, run, _lr_paths(data), resume_from=args.resume)
    return {"run": str(run), "final_l_d": reports["base"][-1].l_d if reports["base"] else None}


def cmd_train_control(args) -> dict:
    cfg = resolve_config(args)
    run = Path(args.out) if args.out else run_dir_from_env("runs/train-control")
    data = Path(args.data)
    _, reports, _ = train_control(load_dataset(data), args.base, cfg, run, _lr_paths(data),
                                  resume_from=args.resume)
    return {"run": str(run), "final_total": reports[-1].total if reports else None}


def cmd_restore(args) -> dict:
    model = load_model(args.ckpt)
    cfg = resolve_config(args, model.cfg)
    scfg = pipeline.sampler_from(cfg, steps=args.steps, guidance=args.guidance,
                                 use_negative=not args.no_negative, init_from_lr=args.init_from_lr or None)
    out = Path(args.out)
    cfg.save(out / "config.cfg")
    written = pipeline.restore_paths(model, pipeline.list_images(args.lr), out, scfg, args.prompt_source,
                                     args.mllm_url, pipeline.checkpoint_ids(args.ckpt))
    return {"written": [str(p) for p in written]}


def cmd_evaluate(args) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    report = pipeline.evaluate_dirs(args.sr_dir, args.hr_dir, out)
    cfg.save(out / "config.cfg")
    return report.aggregate()


def _cmd_ablate(fn, args) -> dict:
    cfg = resolve_config(args)
    out = Path(args.out)
    cfg.save(out / "config.cfg")
    scfg = pipeline.sampler_from(cfg, steps=args.steps, guidance=args.guidance)
    rows = fn(args.data, args.base, cfg, out, scfg)
    return {"rows": len(rows), "report": str(out / "report.csv")}


COMMANDS = {
    "degrade": cmd_degrade,
    "train-base": cmd_train_base,
    "train-control": cmd_train_control,
    "restore": cmd_restore,
    "evaluate": cmd_evaluate,
    "ablate-fusion": lambda a: _cmd_ablate(pipeline.ablate_fusion, a),
    "ablate-dfc": lambda a: _cmd_ablate(pipeline.ablate_dfc, a),
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.use_deterministic_algorithms(True)
    try:
        result = COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line JSON error
        sys.stderr.write(json.dumps({"command": args.command, "error": type(exc).__name__,
                                     "message": str(exc)}) + "\n")
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
