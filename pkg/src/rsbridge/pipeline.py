"""Stage runners shared by the CLI subcommands and the ``pipeline`` orchestrator.

Every stage writes its files under ``<name>.partial`` and renames them when
it finishes, so a failed stage leaves only ``.partial`` files behind.  The
manifest records hashes of all committed artifacts; after each stage the
artifacts of earlier stages are re-hashed to make sure nothing touched
them.
"""
from __future__ import annotations

import logging
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from . import _core
from .config import ExperimentConfig, marginal_from_spec, resolve
from .errors import BridgeError, ConfigError, UnsupportedModelError
from .grid import Grid, Marginal
from .io import (
    boundary_fields,
    file_hash,
    read_marginal,
    read_potentials,
    write_convergence,
    write_json,
    write_marginal,
    write_marginal_flow,
    write_potentials,
    write_rows,
)
from .kernel import Kernel, compose, kernel_analytic, kernel_mc, load_kernel, save_kernel
from .model import ModelSpec, RegimeSet
from .potentials import (
    PotentialField,
    bridge_kernel,
    propagate_phi,
    propagate_phihat,
    solve_bridge,
    uniform_slices,
)
from .simulate import RngStream, simulate_bridge, simulate_reference, write_paths_csv
from .sinkhorn import iterate_C

log = logging.getLogger(__name__)

__version__ = "0.1.0"


class PipelineError(BridgeError):
    """A stage failed; carries the stage name and the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


class IntegrityError(BridgeError):
    """An artifact of an earlier stage changed on disk."""


class StageOutputs:
    """Collects the files of one stage; ``commit`` drops the ``.partial`` suffixes."""

    def __init__(self, root: Path, stage: str):
        self.root = Path(root)
        self.stage = stage
        self.files: list[str] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(rel)
        return p.with_name(p.name + ".partial")

    def commit(self) -> dict[str, str]:
        hashes = {}
        for rel in self.files:
            final = self.root / rel
            os.replace(final.with_name(final.name + ".partial"), final)
            hashes[rel] = file_hash(final)
        return hashes


@dataclass
class RunManifest:
    config_hash: str
    stages: list[dict[str, Any]] = field(default_factory=list)
    artifacts: dict[str, dict[str, str]] = field(default_factory=dict)
    versions: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    status: str = "running"
    error: dict[str, Any] | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def write(self, path: Path) -> None:
        write_json({"kind": "manifest", **self.to_dict()}, path)


def versions() -> dict[str, str]:
    import scipy

    return {
        "rsbridge": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "backend": _core.BACKEND,
    }


def _fmt_t(t: float) -> str:
    return format(float(t), ".6g")


def kernel_name(t: float, s: float) -> str:
    return f"K_{_fmt_t(t)}_{_fmt_t(s)}.bin"


# ---------------------------------------------------------------- stages


def stage_simulate(cfg: ExperimentConfig, outs: StageOutputs) -> None:
    if cfg.model is None or cfg.rho0 is None:
        raise ConfigError("simulate needs [model] and marginals.rho0")
    sim = cfg.simulation
    batch = simulate_reference(cfg.model, cfg.rho0, sim.dt, RngStream(cfg.seed("simulate"), 0), sim.paths)
    write_paths_csv(batch, outs.path("paths.csv"))


def build_kernel(cfg: ExperimentConfig, t: float, s: float) -> Kernel:
    if cfg.solver.kernel == "analytic":
        return kernel_analytic(cfg.model, cfg.grid, t, s, cfg.solver.quadrature)
    return kernel_mc(cfg.model, cfg.grid, t, s, cfg.solver.paths_per_node, cfg.solver.kernel_dt, cfg.seed("kernel"))


def stage_kernel(cfg: ExperimentConfig, outs: StageOutputs) -> None:
    """Analytic: K(0, T), K(t_m, T) and K(0, t_m) on every slice.  Monte Carlo:
    consecutive K(t_m, t_m+1) and their composition K(0, T)."""
    if cfg.model is None:
        raise ConfigError("kernel needs [model]")
    T = cfg.model.horizon
    times = uniform_slices(T, cfg.solver.slices)
    kernels: dict[tuple[float, float], Kernel] = {}
    if cfg.solver.kernel == "analytic":
        kernels[(0.0, T)] = build_kernel(cfg, 0.0, T)
        for t in times[1:-1]:
            kernels[(float(t), T)] = build_kernel(cfg, float(t), T)
            kernels[(0.0, float(t))] = build_kernel(cfg, 0.0, float(t))
    else:
        steps = [build_kernel(cfg, float(a), float(b)) for a, b in zip(times[:-1], times[1:])]
        total = steps[0]
        for K in steps:
            kernels[(K.t, K.s)] = K
        for K in steps[1:]:
            total = compose(total, K)
        kernels[(0.0, T)] = total
    for (t, s), K in sorted(kernels.items()):
        save_kernel(K, outs.path(f"kernels/{kernel_name(t, s)}"))


def solve_files(kernel_path: Path, rho0: Marginal, rhoT: Marginal, tol: float, max_iters: int, f0: np.ndarray | None, outs: StageOutputs):
    K = load_kernel(kernel_path)
    pot, report = iterate_C(f0, K, rho0, rhoT, tol, max_iters)
    phi, phihat = boundary_fields(pot, K.s)
    write_potentials(phi, phihat, outs.path("potentials.csv"))
    write_convergence(report, outs.path("conv.csv"))
    write_json({"kind": "solve", "report": report.to_dict(), "kernel": str(kernel_path.name)}, outs.path("solve.json"))
    if not report.converged:
        from .sinkhorn import SinkhornError

        raise SinkhornError(f"no convergence after {report.iterations} iterations", report)
    return pot, report


def _f0(cfg: ExperimentConfig, regimes: RegimeSet) -> np.ndarray | None:
    if cfg.solver.f0 is None:
        return None
    return read_marginal(resolve(cfg.solver.f0, cfg.base), cfg.grid, regimes).density


def stage_solve(cfg: ExperimentConfig, outs: StageOutputs) -> None:
    if cfg.rho0 is None or cfg.rhoT is None:
        raise ConfigError("solve needs marginals.rho0 and marginals.rhoT")
    T = cfg.model.horizon
    path = outs.root / "kernels" / kernel_name(0.0, T)
    if not path.exists():
        raise ConfigError(f"solve needs the kernel stage output {path}")
    write_marginal(cfg.rho0, outs.path("rho0.csv"))
    write_marginal(cfg.rhoT, outs.path("rhoT.csv"))
    solve_files(path, cfg.rho0, cfg.rhoT, cfg.solver.tol, cfg.solver.max_iters, _f0(cfg, cfg.model.regimes), outs)


def load_kernel_dir(directory: Path) -> list[Kernel]:
    paths = sorted(Path(directory).glob("K_*.bin"))
    if not paths:
        raise ConfigError(f"no kernels in {directory}")
    return [load_kernel(p) for p in paths]


def propagate_from_files(potentials: Path, kernel_dir: Path) -> tuple[PotentialField, PotentialField, Kernel]:
    """Propagate boundary potentials through a directory of kernels.

    The directory holds either K(t, T) and K(0, s) for the slices, or
    consecutive slice kernels (their chain is used both ways).
    """
    kernels = load_kernel_dir(kernel_dir)
    grid, regimes = kernels[0].grid, kernels[0].regimes
    phi_b, phihat_b = read_potentials(potentials, grid, regimes)
    t0, T = float(phi_b.times[0]), float(phi_b.times[-1])
    full = [K for K in kernels if np.isclose(K.t, t0) and np.isclose(K.s, T)]
    if not full:
        raise ConfigError("the kernel directory has no kernel over the whole horizon")
    steps = sorted((K for K in kernels if not (np.isclose(K.t, t0) and np.isclose(K.s, T))), key=lambda K: (K.t, K.s))
    chained = len(steps) > 1 and np.isclose(steps[0].t, t0) and np.isclose(steps[-1].s, T) and all(
        np.isclose(a.s, b.t) for a, b in zip(steps[:-1], steps[1:])
    )
    start = Marginal(grid, regimes, phihat_b.values[0] * grid.weights)
    if chained:
        phi = propagate_phi(phi_b.values[-1], steps)
        phihat = propagate_phihat(1.0, start, steps)
    else:
        to_T = [K for K in steps if np.isclose(K.s, T)]
        from_0 = [K for K in steps if np.isclose(K.t, t0)]
        phi = propagate_phi(phi_b.values[-1], full + to_T)
        phihat = propagate_phihat(1.0, start, from_0 + full)
    return phi, phihat, full[0]


def bridge_files(potentials: Path, kernel_dir: Path, outs: StageOutputs, kernel_out: str = "bridge_kernel.bin", marginals_out: str = "marginals.csv"):
    phi, phihat, K = propagate_from_files(potentials, kernel_dir)
    if not np.allclose(phi.times, phihat.times):
        raise ConfigError("the kernels give different slices for phi and phihat")
    save_kernel(bridge_kernel(phi, K), outs.path(kernel_out))
    write_marginal_flow(phi, phihat, outs.path(marginals_out))
    write_potentials(phi, phihat, outs.path("bridge_potentials.csv"))
    return phi, phihat


def stage_bridge(cfg: ExperimentConfig, outs: StageOutputs) -> None:
    bridge_files(outs.root / "potentials.csv", outs.root / "kernels", outs)


def verify_report(cfg: ExperimentConfig, phi: PotentialField | None = None, phihat: PotentialField | None = None) -> dict[str, Any]:
    """Run the configured verification suites; refinements are solved in place with analytic kernels."""
    from . import verify as V

    model = cfg.model
    if model is None:
        raise ConfigError("verify needs [model]")
    out: dict[str, Any] = {"kind": "verify", "suites": {}}
    rng = np.random.default_rng(cfg.seed("verify"))
    need_solution = any(s in cfg.suites for s in ("backward", "forward", "bridge"))
    refined = None
    if need_solution:
        if cfg.rho0 is None or cfg.rhoT is None:
            raise ConfigError("these suites need marginals.rho0 and marginals.rhoT")
        if phi is None:
            sol = solve_bridge(model, cfg.grid, cfg.rho0, cfg.rhoT, slices=cfg.solver.slices, quadrature=cfg.solver.quadrature, tol=cfg.solver.tol, max_iters=cfg.solver.max_iters)
            phi, phihat = sol.phi, sol.phihat
        try:
            fine = cfg.grid.refine()
            r0 = _regrid(cfg, cfg.rho0, fine)
            rT = _regrid(cfg, cfg.rhoT, fine)
            refined = solve_bridge(model, fine, r0, rT, slices=2 * (phi.times.size - 1), quadrature=cfg.solver.quadrature, tol=cfg.solver.tol, max_iters=cfg.solver.max_iters)
        except UnsupportedModelError as exc:
            out["refinement"] = f"skipped: {exc}"
    for suite in cfg.suites:
        if suite == "backward":
            rep = V.check_backward(phi, model, refined=refined.phi if refined else None)
        elif suite == "forward":
            rep = V.check_forward(phihat, model, refined=refined.phihat if refined else None)
        elif suite == "bridge":
            if cfg.grid.d != 1:
                out["suites"][suite] = {"skipped": "pointwise bridge identity is implemented for d = 1"}
                continue
            rep = V.check_bridge_forward(phi, phihat, model, refined=(refined.phi, refined.phihat) if refined else None, seed=cfg.seed("verify"))
        else:
            gaps = []
            for _ in range(20):
                f = V.random_bump_field(cfg.grid, model.n_regimes, rng)
                g = V.random_bump_field(cfg.grid, model.n_regimes, rng)
                t = float(rng.uniform(0.0, model.horizon))
                lhs, rhs = V.adjoint_gap(f, g, model, t, cfg.grid)
                scale = max(abs(lhs), abs(rhs))
                gaps.append(abs(lhs - rhs) / scale if scale > 0 else 0.0)
            out["suites"][suite] = {"identity": "adjoint", "pairs": len(gaps), "max_relative_gap": float(max(gaps)), "gaps": gaps}
            continue
        out["suites"][suite] = rep.to_dict()
    return out


def _regrid(cfg: ExperimentConfig, marg: Marginal, fine: Grid) -> Marginal:
    spec = cfg.raw.get("marginals", {}).get("rho0" if marg is cfg.rho0 else "rhoT")
    if isinstance(spec, str):
        raise UnsupportedModelError("refinement needs marginals given by components, not files")
    return marginal_from_spec(spec, fine, cfg.model.regimes, cfg.base)


def stage_verify(cfg: ExperimentConfig, outs: StageOutputs) -> None:
    path = outs.root / "bridge_potentials.csv"
    phi = phihat = None
    if path.exists():
        phi, phihat = read_potentials(path, cfg.grid, cfg.model.regimes)
    write_json(verify_report(cfg, phi, phihat), outs.path("report.json"))


def stage_usbp(cfg: ExperimentConfig, outs: StageOutputs, prefix: str = "usbp/") -> dict[str, Any]:
    from .usbp import run_usbp

    return run_usbp(cfg, outs, prefix)


STAGE_RUNNERS: dict[str, Callable[[ExperimentConfig, StageOutputs], Any]] = {
    "simulate": stage_simulate,
    "kernel": stage_kernel,
    "solve": stage_solve,
    "bridge": stage_bridge,
    "verify": stage_verify,
    "usbp": stage_usbp,
}


# ---------------------------------------------------------------- orchestration


def run_pipeline(cfg: ExperimentConfig, stages: Sequence[str] | None = None, out: Path | None = None) -> RunManifest:
    """Run stages in order, writing artifacts and ``manifest.json`` under ``out``."""
    stages = tuple(stages if stages is not None else cfg.stages)
    if not stages:
        raise ConfigError("no stages requested")
    root = Path(out or cfg.out)
    root.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        cfg.digest(),
        versions=versions(),
        seeds={"root": cfg.simulation.seed, **{p: cfg.seed(p) for p in ("simulate", "kernel", "bridge", "verify", "usbp")}},
    )
    try:
        for stage in stages:
            if stage not in STAGE_RUNNERS:
                raise ConfigError(f"unknown stage {stage!r}")
            outs = StageOutputs(root, stage)
            start = time.perf_counter()
            log.info("stage %s", stage)
            try:
                STAGE_RUNNERS[stage](cfg, outs)
            except BridgeError as exc:
                raise PipelineError(stage, exc) from exc
            hashes = outs.commit()
            _check_untouched(root, manifest)
            for rel, digest in hashes.items():
                manifest.artifacts[rel] = {"stage": stage, "sha256": digest}
            manifest.stages.append({"name": stage, "wall_time": time.perf_counter() - start, "artifacts": sorted(hashes)})
        manifest.status = "ok"
    except PipelineError as exc:
        manifest.status = "failed"
        manifest.error = {"stage": exc.stage, "type": type(exc.cause).__name__, "message": str(exc.cause), "exit_code": exc.exit_code}
        manifest.write(root / "manifest.json")
        raise
    manifest.write(root / "manifest.json")
    return manifest


def _check_untouched(root: Path, manifest: RunManifest) -> None:
    for rel, info in manifest.artifacts.items():
        if file_hash(root / rel) != info["sha256"]:
            raise IntegrityError(f"artifact {rel} of stage {info['stage']} changed")
