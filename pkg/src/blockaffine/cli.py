"""Command-line experiment runner.

Exit codes: 0 success, 1 validation error, 2 runtime or verification failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import re
import statistics
import sys
from pathlib import Path

import numpy as np

from .adapters import CATALOGS, VARIANTS, AdapterConfig, ConfigError, format_millions, param_count
from .experiment import ExperimentConfig
from .model import FrozenLinearModel, Layer
from .persistence import (
    CheckpointError,
    export_merged,
    load_model,
    model_tensors,
    read_loss_log,
    save_checkpoint,
    write_loss_log,
)
from .tensor import DTypeError, ShapeError, Tensor, no_tape
from .train import TrainingDiverged, train
from .verify import grad_check_all, oracle_sweep

log = logging.getLogger("blockaffine")

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
ORACLE_TOLERANCE = 1e-13
MERGE_TOLERANCE = 1e-12

# rows of the published trainable-parameter columns
PUBLISHED_ROWS = [
    ("lora", 36), ("bone_col", 16), ("bone_col", 32), ("bone_col", 64), ("bone_col", 128),
    ("bone_row", 64), ("bone_unconstrained", 32),
]


class Invalid(Exception):
    pass


def _config_for(variant: str, size: int, groups: int | None) -> AdapterConfig:
    if variant == "lora":
        return AdapterConfig("lora", rank=size)
    return AdapterConfig(variant, block_size=size, groups=groups)


# --------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config).with_overrides(args.out, args.seed_override, args.dtype)
    out = Path(cfg.output_dir)
    variant = cfg.adapter.variant
    for run in cfg.runs():
        stem = f"{variant}_{run.seed}"
        result = train(run)
        write_loss_log(out / f"{stem}.csv", result.log)
        meta = run.metadata()
        meta.update(step=run.steps, final_loss=result.final_loss,
                    nonlinearities=list(run.nonlinearities))
        save_checkpoint(out / f"{stem}.ckpt", model_tensors(result.model), meta)
        report = dict(result.memory.to_dict(), variant=variant, recompute=run.adapter.recompute,
                      dtype=run.dtype, seed=run.seed)
        (out / f"{stem}_memory.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        first = result.log[0][1] if result.log else result.final_loss
        print(f"{stem}: loss {first:.6g} -> {result.final_loss:.6g} "
              f"(peak tracked {result.memory.peak_tracked_bytes} B)")
    return EXIT_OK


# --------------------------------------------------------------------------
# param-count

def cmd_param_count(args) -> int:
    if args.target in CATALOGS:
        shapes, label = CATALOGS[args.target], args.target
        if args.variant is None:
            rows = [_config_for(v, s, None) for v, s in PUBLISHED_ROWS]
        else:
            if args.size is None:
                raise Invalid("param-count needs a size (b or r) when a variant is given")
            rows = [_config_for(args.variant, args.size, args.groups)]
    else:
        cfg = ExperimentConfig.load(args.target)
        shapes, label, rows = cfg.layer_shapes, args.target, [cfg.adapter]
    print(f"{'catalog':<16}{'variant':<20}{'size':>6}{'trainable':>16}{'millions':>10}")
    for c in rows:
        count = param_count(shapes, c)
        print(f"{label:<16}{c.variant:<20}{c.size:>6}{count:>16,}{format_millions(count):>10}")
    return EXIT_OK


# --------------------------------------------------------------------------
# grad-check / oracle-check

def cmd_grad_check(args) -> int:
    dtype = args.dtype or "f64"
    if args.config:
        ExperimentConfig.load(args.config)
    results = grad_check_all(range(args.seeds), dtype, corrupt=args.inject_fault)
    ok = True
    for v in VARIANTS:
        rs = [r for r in results if r.variant == v]
        worst = max(r.max_rel_err for r in rs)
        passed = all(r.passed for r in rs)
        ok &= passed
        print(f"{v:<20} {dtype} seeds={len(rs):<3} max_rel_err={worst:.3e} "
              f"tol={rs[0].tolerance:.0e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_oracle_check(args) -> int:
    results = oracle_sweep(seeds=range(args.seeds))
    ok = True
    for v in VARIANTS:
        worst = max(r.rel_err for r in results if r.variant == v)
        passed = worst <= ORACLE_TOLERANCE
        ok &= passed
        print(f"{v:<20} cases={sum(r.variant == v for r in results):<5} "
              f"max_rel_err={worst:.3e} {'PASS' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAILED


# --------------------------------------------------------------------------
# merge

def _as_f64(model: FrozenLinearModel) -> FrozenLinearModel:
    layers = tuple(Layer(Tensor(l.weight.data, "f64"), l.nonlinearity) for l in model.layers)
    if model.adapters is None:
        return FrozenLinearModel(layers)
    from .adapters import AdapterState
    states = tuple(AdapterState({k: Tensor(t.data, "f64") for k, t in st.tensors.items()})
                   for st in model.adapters)
    return FrozenLinearModel(layers, model.config, states)


def merge_discrepancy(model: FrozenLinearModel, batch: int = 32, seed: int = 0) -> float:
    """Max |adapter forward - merged forward| on a seeded random batch, in float64."""
    m64 = _as_f64(model)
    X = Tensor(np.random.default_rng(seed).standard_normal((batch, m64.shapes[0][1])))
    with no_tape():
        live = m64.forward(X).data
        merged = m64.merged().forward(X).data
    return float(np.max(np.abs(live - merged)))


def cmd_merge(args) -> int:
    model, meta = load_model(args.checkpoint)
    if model.adapters is None:
        raise Invalid(f"{args.checkpoint} holds no adapter state")
    diff = merge_discrepancy(model)
    if diff >= MERGE_TOLERANCE:
        print(f"merge verification failed: max abs diff {diff:.3e} >= {MERGE_TOLERANCE:.0e}", file=sys.stderr)
        return EXIT_FAILED
    keep = {k: meta[k] for k in ("adapter", "seed", "step") if k in meta}
    export_merged(args.out, model, metadata={"source": keep})
    print(f"merged {len(model.layers)} layers -> {args.out} (verified, max abs diff {diff:.3e})")
    return EXIT_OK


# --------------------------------------------------------------------------
# compare

_STEM = re.compile(r"^(?P<arm>.+)_(?P<seed>-?\d+)$")


def cmd_compare(args) -> int:
    arms: dict[str, list[tuple[str, float | None, float]]] = {}
    for path in args.logs:
        rows = read_loss_log(path)
        if not rows:
            raise Invalid(f"{path}: empty loss log")
        stem = Path(path).stem
        m = _STEM.match(stem)
        arm, seed = (m["arm"], m["seed"]) if m else (stem, "-")
        at = dict(rows).get(args.step)
        arms.setdefault(arm, []).append((seed, at, rows[-1][1]))
    print(f"{'arm':<20}{'seed':>6}{f'step {args.step}':>16}{'final':>16}")
    for arm, entries in arms.items():
        for seed, at, final in entries:
            at_s = f"{at:.9g}" if at is not None else "-"
            print(f"{arm:<20}{seed:>6}{at_s:>16}{final:>16.9g}")
    print()
    print(f"{'arm':<20}{'runs':>6}{f'median {args.step}':>16}{'median final':>16}")
    for arm, entries in arms.items():
        ats = [a for _, a, _ in entries if a is not None]
        med_at = f"{statistics.median(ats):.9g}" if ats else "-"
        print(f"{arm:<20}{len(entries):>6}{med_at:>16}{statistics.median(f for *_, f in entries):>16.9g}")
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blockaffine", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train every seed of an experiment config")
    t.add_argument("config_path", nargs="?")
    t.add_argument("--config", dest="config_flag")
    t.add_argument("--out", help="override output_dir")
    t.add_argument("--seed-override", type=int)
    t.add_argument("--dtype", choices=["f32", "f64"])
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("param-count", help="trainable parameter counts for a catalog or config")
    c.add_argument("target", help=f"catalog name ({', '.join(CATALOGS)}) or config path")
    c.add_argument("variant", nargs="?", choices=VARIANTS)
    c.add_argument("size", nargs="?", type=int, help="block size b, or rank r for lora")
    c.add_argument("--groups", type=int, help="group count g for bone_both")
    c.set_defaults(func=cmd_param_count)

    g = sub.add_parser("grad-check", help="finite-difference check of every variant")
    g.add_argument("--config")
    g.add_argument("--dtype", choices=["f32", "f64"])
    g.add_argument("--seeds", type=int, default=10)
    g.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)

    o = sub.add_parser("oracle-check", help="vectorized delta-W vs per-block loop sweep")
    o.add_argument("--seeds", type=int, default=5)
    o.set_defaults(func=cmd_oracle_check)

    m = sub.add_parser("merge", help="fold adapters into the base weights")
    m.add_argument("checkpoint")
    m.add_argument("out", nargs="?")
    m.add_argument("--out", dest="out_flag")
    m.set_defaults(func=cmd_merge)

    k = sub.add_parser("compare", help="loss at a step and at the end, per arm and seed")
    k.add_argument("logs", nargs="+")
    k.add_argument("--step", type=int, default=100)
    k.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "train":
        args.config = args.config_flag or args.config_path
        if not args.config:
            parser.error("train needs a config path")
    if args.command == "merge":
        args.out = args.out_flag or args.out
        if not args.out:
            parser.error("merge needs an output path")
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DTypeError, Invalid, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
