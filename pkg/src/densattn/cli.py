"""densattn command line: density-gen, ablate, audit, verify.

Exit codes: 0 success, 1 budget/acceptance failure, 2 input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .attention import TABLE_CONFIGS, AttentionConfig, budget_audit

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_density_gen(args) -> int:
    from .density import KernelSpec, generate_density_map, load_annotation, write_dmap, write_dmap_csv

    try:
        kernel = KernelSpec.parse(args.kernel)
    except ValueError as exc:
        _err(f"error: bad --kernel: {exc}")
        return EXIT_INPUT
    ann_dir, out_dir = Path(args.ann), Path(args.out)
    if not ann_dir.is_dir():
        _err(f"error: annotation directory {ann_dir} not found")
        return EXIT_INPUT
    files = sorted(p for p in ann_dir.iterdir() if p.suffix.lower() in (".json", ".csv"))
    if not files:
        _err(f"error: no .json or .csv annotations in {ann_dir}")
        return EXIT_INPUT
    out_dir.mkdir(parents=True, exist_ok=True)

    ok, mass, points = 0, [], 0
    for path in files:
        try:
            ann = load_annotation(path)
        except (ValueError, OSError) as exc:
            _err(f"warning: skipping {path.name}: {exc}")
            continue
        dmap = generate_density_map(ann, kernel)
        write_dmap(out_dir / f"{ann.image_id}.dmap", dmap)
        if args.text:
            write_dmap_csv(out_dir / f"{ann.image_id}.csv", dmap)
        ok += 1
        mass.append(dmap.count)
        points += len(ann)
    if not ok:
        _err("error: every annotation failed to load")
        return EXIT_INPUT
    print(f"wrote {ok} density maps: total mass {math.fsum(mass):.6f} vs {points} points")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .experiment import ExperimentConfig, run_ablation

    try:
        exp = ExperimentConfig.load(args.config)
        if args.output_dir:
            exp.output_dir = args.output_dir
        if args.seed is not None:
            exp.seed = args.seed
        if args.epochs is not None:
            exp.train = replace(exp.train, epochs=args.epochs)
        exp.validate()
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        _err(f"error: invalid experiment config: {exc}")
        return EXIT_INPUT
    reports = run_ablation(exp)
    print(f"{'config':<16}{'MAE':>10}{'MSE':>10}{'params':>12}  added")
    for r in reports:
        print(f"{r.label:<16}{r.mae:>10.4f}{r.mse:>10.4f}{r.params:>12}  {'Yes' if r.added_params else 'No'}")
    print(f"comparison written to {Path(exp.output_dir) / 'comparison.csv'}")
    return EXIT_OK


def cmd_audit(args) -> int:
    if args.config:
        try:
            cfgs = [AttentionConfig.parse(c) for c in args.config]
        except ValueError as exc:
            _err(f"error: {exc}")
            return EXIT_INPUT
    else:
        cfgs = list(TABLE_CONFIGS)
    if args.channels < 1 or args.base < 1:
        _err("error: --channels and --base must be positive")
        return EXIT_INPUT

    print(f"{'config':<14}{'added':>10}{'ratio':>10}  within 1%")
    over, bad = False, False
    for cfg in cfgs:
        try:
            rep = budget_audit(args.base, cfg, args.channels)
        except ValueError as exc:
            print(f"{cfg.label:<14}  error: {exc}")
            bad = True
            continue
        over |= not rep.within_budget
        print(f"{rep.label:<14}{rep.added_params:>10}{rep.ratio:>10.4%}  {'yes' if rep.within_budget else 'NO'}")
    if bad:
        return EXIT_INPUT
    return EXIT_FAIL if over else EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_checks, summary

    results = run_checks(args.filter)
    if not results:
        _err(f"error: no checks match filter {args.filter!r}")
        return EXIT_INPUT
    print(summary(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densattn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("density-gen", help="annotations -> DMAP density maps")
    d.add_argument("--ann", required=True, help="directory of .json (or .csv + .size) annotations")
    d.add_argument("--out", required=True)
    d.add_argument("--kernel", default="adaptive:beta=0.3,k=3",
                   help="adaptive:beta=B,k=K or fixed:sigma=S")
    d.add_argument("--text", action="store_true", help="also write CSV grids")
    d.set_defaults(func=cmd_density_gen)

    a = sub.add_parser("ablate", help="train and compare attention configs")
    a.add_argument("--config", required=True, help="experiment JSON file")
    a.add_argument("--output-dir")
    a.add_argument("--seed", type=int)
    a.add_argument("--epochs", type=int)
    a.set_defaults(func=cmd_ablate)

    u = sub.add_parser("audit", help="added-parameter budget per attention config")
    u.add_argument("--channels", type=int, default=512)
    u.add_argument("--base", type=int, default=16_263_041)
    u.add_argument("--config", action="append",
                   help="e.g. SE:r=4 (repeatable); default: the eleven reference configurations")
    u.set_defaults(func=cmd_audit)

    v = sub.add_parser("verify", help="run oracle / gradient / invariant checks")
    v.add_argument("--filter", help="only checks whose name contains this substring")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
