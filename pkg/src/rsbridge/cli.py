"""Command line interface.

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 unsupported model.  ``RB_THREADS`` (or ``--threads``) caps the worker
count.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BridgeError, ConfigError

log = logging.getLogger("rsbridge")


class NamedOutputs:
    """StageOutputs variant whose files go to explicitly named paths."""

    def __init__(self, names: dict[str, str | Path], root: Path):
        from .pipeline import StageOutputs

        self._inner = StageOutputs(root, "cli")
        self.names = {k: Path(v) for k, v in names.items()}
        self.root = root
        self._moves: list[tuple[Path, Path]] = []

    def path(self, rel: str) -> Path:
        if rel in self.names:
            final = self.names[rel]
            final.parent.mkdir(parents=True, exist_ok=True)
            tmp = final.with_name(final.name + ".partial")
            self._moves.append((tmp, final))
            return tmp
        final = self.root / rel
        final.parent.mkdir(parents=True, exist_ok=True)
        tmp = final.with_name(final.name + ".partial")
        self._moves.append((tmp, final))
        return tmp

    def commit(self, only: Sequence[str] | None = None) -> None:
        keep = None if only is None else {self.names.get(n, self.root / n) for n in only}
        for tmp, final in self._moves:
            if not tmp.exists():
                continue
            if keep is None or final in keep:
                os.replace(tmp, final)
            else:
                tmp.unlink()


def _load(args, **overrides):
    from .config import load_config

    extra = {}
    if getattr(args, "grid", None):
        extra["grid"] = {"axes": args.grid}
    for section, values in overrides.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            extra.setdefault(section, {}).update(values)
    return load_config(args.config, extra)


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    from .io import read_potentials
    from .potentials import optimal_controls
    from .simulate import RngStream, simulate_bridge, simulate_reference, write_paths_csv

    cfg = _load(args, simulation={"paths": args.paths, "dt": args.dt, "seed": args.seed})
    if cfg.model is None:
        raise ConfigError("simulate needs [model]")
    start = cfg.rho0
    if args.x0 is not None:
        start = (np.asarray(args.x0, float), cfg.model.regimes.index(args.regime))
    if start is None:
        raise ConfigError("give marginals.rho0 in the config or --x0")
    sim = cfg.simulation
    rng = RngStream(cfg.seed("simulate"), 0)
    if args.potentials:
        phi, _ = read_potentials(args.potentials, cfg.grid, cfg.model.regimes)
        batch = simulate_bridge(cfg.model, optimal_controls(phi, cfg.model), start, sim.dt, rng, sim.paths, record=True)
    else:
        batch = simulate_reference(cfg.model, start, sim.dt, rng, sim.paths)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    write_paths_csv(batch, tmp)
    os.replace(tmp, out)
    print(f"wrote {batch.size} paths ({int(batch.rejected.sum())} rejected) to {out}")
    return 0


def cmd_kernel(args) -> int:
    from .kernel import kernel_analytic, kernel_mc, save_kernel

    cfg = _load(args, solver={"quadrature": args.quadrature})
    if cfg.model is None:
        raise ConfigError("kernel needs [model]")
    s = cfg.model.horizon if args.s is None else args.s
    if args.method == "analytic":
        K = kernel_analytic(cfg.model, cfg.grid, args.t, s, cfg.solver.quadrature)
    else:
        K = kernel_mc(cfg.model, cfg.grid, args.t, s, args.paths_per_node, args.dt, cfg.seed("kernel") if args.seed is None else args.seed)
    out = Path(args.out)
    tmp = out.with_name(out.name + ".partial")
    digest = save_kernel(K, tmp)
    os.replace(tmp, out)
    print(f"wrote kernel {out} ({K.n_regimes} regimes, {K.grid.size} nodes, flags {list(K.flags)}) sha256 {digest}")
    return 0


def cmd_solve(args) -> int:
    from .io import read_marginal
    from .kernel import load_kernel
    from .pipeline import solve_files

    K = load_kernel(args.kernel)
    rho0 = read_marginal(args.rho0, K.grid, K.regimes)
    rhoT = read_marginal(args.rhoT, K.grid, K.regimes)
    f0 = read_marginal(args.f0, K.grid, K.regimes).density if args.f0 else None
    out = Path(args.out)
    conv = Path(args.report) if args.report else out.with_name(out.stem + "_conv.csv")
    outs = NamedOutputs({"potentials.csv": out, "conv.csv": conv, "solve.json": out.with_suffix(".json")}, out.parent)
    try:
        _, report = solve_files(Path(args.kernel), rho0, rhoT, args.tol, args.max_iters, f0, outs)
    except BridgeError:
        # keep the convergence history of a failed solve, not its potentials
        outs.commit(only=("conv.csv", "solve.json"))
        raise
    outs.commit()
    print(f"converged in {report.iterations} iterations, marginal errors {report.marginal_error0:.3e} / {report.marginal_errorT:.3e}")
    return 0


def cmd_bridge(args) -> int:
    from .pipeline import bridge_files

    out = Path(args.out)
    outs = NamedOutputs(
        {"bridge_kernel.bin": out, "marginals.csv": args.marginals, "bridge_potentials.csv": Path(args.marginals).with_name("bridge_potentials.csv")},
        out.parent,
    )
    phi, _ = bridge_files(Path(args.potentials), Path(args.kernels), outs)
    outs.commit()
    print(f"wrote bridge kernel {out} and marginals on {phi.times.size} slices to {args.marginals}")
    return 0


def cmd_verify(args) -> int:
    from .io import write_json
    from .pipeline import verify_report

    cfg = _load(args, solver={"slices": args.slices})
    if args.suite:
        cfg.suites = tuple(args.suite)
    report = verify_report(cfg)
    write_json(report, args.out)
    for name, rep in report["suites"].items():
        if "max_residual" in rep:
            print(f"{name}: max residual {rep['max_residual']:.3e} ratio {rep.get('ratio')}")
        elif "max_relative_gap" in rep:
            print(f"{name}: max relative gap {rep['max_relative_gap']:.3e} over {rep['pairs']} pairs")
        else:
            print(f"{name}: {rep}")
    return 0


def cmd_usbp(args) -> int:
    from .usbp import run_usbp

    cfg = _load(args, usbp={"slices": args.slices, "assembly": args.assembly, "paths": args.paths})
    out = Path(args.out)
    outs = NamedOutputs({}, out)
    report = run_usbp(cfg, outs, prefix="")
    outs.commit()
    km = report["killed_mass"]
    print(f"killed mass {km['quadrature']:.9f} (exact {km['exact']:.9f}); bridge mass error {report['mass_bookkeeping_max_error']:.2e}")
    return 0


def cmd_pipeline(args) -> int:
    from .config import load_config
    from .pipeline import run_pipeline

    cfg = load_config(args.config)
    stages = args.stages.split(",") if args.stages else None
    manifest = run_pipeline(cfg, stages, Path(args.out) if args.out else None)
    print(f"{len(manifest.stages)} stage(s) ok; {len(manifest.artifacts)} artifacts; manifest in {Path(args.out or cfg.out) / 'manifest.json'}")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rsbridge", description="Schrodinger bridges over regime-switching jump diffusions.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--threads", type=int, help="cap on worker threads (sets RB_THREADS)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate reference (or bridge) paths to CSV")
    s.add_argument("--config", required=True)
    s.add_argument("--paths", type=int)
    s.add_argument("--dt", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--x0", type=float, nargs="+", help="start point instead of marginals.rho0")
    s.add_argument("--regime", default="1")
    s.add_argument("--grid")
    s.add_argument("--potentials", help="simulate the bridge driven by these potentials")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("kernel", help="build a transition kernel")
    s.add_argument("--config", required=True)
    s.add_argument("--grid")
    s.add_argument("--t", type=float, default=0.0)
    s.add_argument("--s", type=float)
    s.add_argument("--method", choices=("analytic", "mc"), default="analytic")
    s.add_argument("--quadrature", choices=("point", "cell", "hat"))
    s.add_argument("--paths-per-node", type=int, default=2000)
    s.add_argument("--dt", type=float, default=0.01)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_kernel)

    s = sub.add_parser("solve", help="solve the static system on a kernel")
    s.add_argument("--kernel", required=True)
    s.add_argument("--rho0", required=True)
    s.add_argument("--rhoT", required=True)
    s.add_argument("--f0")
    s.add_argument("--tol", type=float, default=1e-10)
    s.add_argument("--max-iters", type=int, default=10_000)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("bridge", help="propagate potentials; write the bridge kernel and marginals")
    s.add_argument("--potentials", required=True)
    s.add_argument("--kernels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--marginals", required=True)
    s.set_defaults(func=cmd_bridge)

    s = sub.add_parser("verify", help="run identity checks and write a JSON report")
    s.add_argument("--config", required=True)
    s.add_argument("--suite", action="append", choices=("backward", "forward", "adjoint", "bridge"))
    s.add_argument("--grid")
    s.add_argument("--slices", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("usbp", help="solve a bridge with killing")
    s.add_argument("--config", required=True)
    s.add_argument("--grid")
    s.add_argument("--slices", type=int)
    s.add_argument("--assembly", choices=("closed", "chained"))
    s.add_argument("--paths", type=int, help="Monte Carlo bridge paths for the hazard table (0 to skip)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_usbp)

    s = sub.add_parser("pipeline", help="run configured stages and write a manifest")
    s.add_argument("--config", required=True)
    s.add_argument("--stages", help="comma-separated stage list (default: [pipeline].stages)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_pipeline)
    return p


def _glue_negative_values(argv: list[str]) -> list[str]:
    """Let ``--grid -6:6:200`` through argparse, which would read the value as an option."""
    out: list[str] = []
    it = iter(argv)
    for arg in it:
        if arg == "--grid":
            value = next(it, None)
            out.append(arg if value is None else f"{arg}={value}")
        else:
            out.append(arg)
    return out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_glue_negative_values(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None:
        os.environ["RB_THREADS"] = str(args.threads)
    try:
        return args.func(args)
    except BridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
