"""Command line entry point ``cemgmsdg``.

Exit codes: 0 success, 1 usage / configuration error, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .driver import (ConfigError, ExperimentConfig, build_problem, decay_study,
                     manufactured_study, observed_orders, run_experiment)
from .medium import FieldFileError
from .numkernel import SolverError
from .offline import build_auxiliary_space

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cemgmsdg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="offline space + online adaptive enrichment")
    r.add_argument("--config", type=Path)
    r.add_argument("--theta", type=float)
    r.add_argument("--niter", type=int, dest="n_iter")
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--threads", type=int)
    r.add_argument("--maps", action="store_true", help="write indicator/enrichment CSV grids")

    d = sub.add_parser("decay", help="||psi_glo - psi_ms(m)||_a against oversampling layers m")
    d.add_argument("--config", type=Path)
    d.add_argument("--modes", type=int, default=1, help="auxiliary mode j (1-based)")
    d.add_argument("--layers", type=int, default=4, help="largest m")
    d.add_argument("--block", type=int, help="coarse block (default: central block)")
    d.add_argument("--out")

    c = sub.add_parser("check", help="manufactured-solution convergence of the fine IPDG solver")
    c.add_argument("--levels", type=int, default=3)
    c.add_argument("--coarse", type=int, default=4)
    return p


def _load_config(path: Path | None) -> ExperimentConfig:
    return ExperimentConfig.load(path) if path else ExperimentConfig().validate()


def _cmd_run(args) -> int:
    cfg = _load_config(args.config)
    overrides = {k: getattr(args, k) for k in ("theta", "n_iter", "seed", "out", "threads")}
    if args.maps:
        overrides["write_maps"] = True
    cfg = cfg.updated(overrides)
    table = run_experiment(cfg)
    print(table.format())
    print(f"wrote {Path(cfg.out) / 'results.csv'}")
    return EXIT_OK


def _cmd_decay(args) -> int:
    cfg = _load_config(args.config)
    if args.out:
        cfg = cfg.updated({"out": args.out})
    prob = build_problem(cfg)
    grid = prob.grid
    aux = build_auxiliary_space(prob.forms, cfg.n_aux, threads=cfg.threads)
    block = args.block if args.block is not None else (grid.ny // 2) * grid.nx + grid.nx // 2
    if not 1 <= args.modes <= cfg.n_aux:
        raise ConfigError(f"--modes must be in 1..{cfg.n_aux}")
    rows = decay_study(prob.forms, aux, block, args.modes - 1, range(1, args.layers + 1))
    lines = ["m,e_a,ratio"]
    prev = None
    for m, e in rows:
        ratio = e / prev if prev else float("nan")
        lines.append(f"{m},{e:.8e},{ratio:.8e}")
        prev = e
    text = "\n".join(lines) + "\n"
    print(text, end="")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "decay.csv").write_text(text)
    return EXIT_OK


def _cmd_check(args) -> int:
    rows = manufactured_study(args.levels, coarse_n=args.coarse)
    print("h,e_l2,e_dg")
    for h, a, b in rows:
        print(f"{h:.8e},{a:.8e},{b:.8e}")
    for (o2, odg) in observed_orders(rows):
        print(f"order L2={o2:.3f} DG={odg:.3f}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _cmd_run, "decay": _cmd_decay, "check": _cmd_check}[args.cmd]
    try:
        return handler(args)
    except (ConfigError, FieldFileError) as exc:
        print(f"cemgmsdg {args.cmd}: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"cemgmsdg {args.cmd}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
