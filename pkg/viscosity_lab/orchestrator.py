"""
Resonance Lab Orchestrator
==========================

Runs one command of the toolkit end to end: loads the configuration, drives
the numerical modules on a worker pool, writes the artifacts and the run
manifest, and maps failures to exit codes.
"""

import argparse
import asyncio
import logging
import sys
from concurrent.futures import Executor, ThreadPoolExecutor
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from lab_io.artifact_store import (
    ArtifactStore,
    branches_frame,
    crossings_frame,
    eigenfunction_frame,
    exponents_frame,
    limits_payload,
    trace_frame,
    trajectories_frame,
)
from lab_io.manifest import RunManifest
from lab_io.run_config import RunConfig, config_hash, load_run_config

from .continuation import (
    BranchStatus,
    gap_diagnostic,
    modulus_gap_count,
    mirror_negative_viscosity,
    sweep,
)
from .correlation_lab import (
    collect_eigendata,
    correlation,
    expansion_reconstruct,
    fourier_mode,
    koopman_correlation,
    mc_vs_operator,
    trig_observable,
)
from .dynamics import (
    SectionCrossings,
    SectionPlane,
    axis_seeds,
    classify_section,
    gamma0_estimate,
    poincare_section,
    stochastic_vs_deterministic,
)
from .eigensolver import (
    ResonanceSet,
    calibrated_c0,
    dense_spectrum,
    one_norm,
    parabola_count,
    semiclassical_disc_count,
    shift_invert_arnoldi,
    symmetry_defect,
    truncation_consistency,
)
from .exceptions import ConfigError, LabError, PreconditionError
from .generator_assembly import (
    OperatorKind,
    OperatorMatrix,
    assemble_flow_generator,
    assemble_noisy_koopman,
    conjugate_spectrum_check,
    imaginary_bound,
)
from .phase_models import TWO_PI, FlowField, MapSystem, nose_hoover_field
from .projectors import auto_radius, contour_projector, eigenfunctions, projector_continuity, schur_projector
from .stage_monitor import StageMonitor

logger = logging.getLogger(__name__)

COMMANDS = ("spectrum", "sweep", "project", "correlate", "langevin", "diagnose", "nosehoover")
SECTION_CHUNK = 5

System = Union[FlowField, MapSystem]


class ResonanceLab:
    """
    One toolkit run.

    Coordinates:
    - operator assembly and spectra
    - viscosity sweeps and limits
    - projectors, correlations and Monte-Carlo checks
    - dynamical diagnostics and section data
    - artifact writing and the run manifest
    """

    def __init__(self, config: RunConfig, version: str = "0.0.0"):
        self.config = config
        self.version = version
        self.monitor = StageMonitor({"prometheus_textfile": config.monitoring.prometheus_textfile})
        self.store: Optional[ArtifactStore] = None
        self._executor: Optional[Executor] = None
        self._running = False

        self.stats = {"commands_run": 0, "commands_failed": 0, "files_written": 0}
        self._commands: Dict[str, Callable[[RunManifest], Awaitable[None]]] = {
            "spectrum": self.cmd_spectrum,
            "sweep": self.cmd_sweep,
            "project": self.cmd_project,
            "correlate": self.cmd_correlate,
            "langevin": self.cmd_langevin,
            "diagnose": self.cmd_diagnose,
            "nosehoover": self.cmd_nosehoover,
        }
        logger.info(f"Resonance lab initialized ({config.threads} threads, out={config.output_dir})")

    async def start(self) -> None:
        if self._running:
            logger.warning("Resonance lab is already running")
            return
        self._executor = ThreadPoolExecutor(max_workers=self.config.threads)
        self.store = ArtifactStore(self.config.output_dir)
        self._running = True

    async def stop(self) -> None:
        if not self._running:
            return
        self._running = False
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    @property
    def executor(self) -> Optional[Executor]:
        return self._executor

    async def run(self, command: str) -> RunManifest:
        """Execute `command` and write its manifest, also on failure."""
        if command not in self._commands:
            raise ConfigError(f"Unknown command {command!r}; choose from {', '.join(COMMANDS)}")
        if not self._running:
            await self.start()
        assert self.store is not None

        manifest = RunManifest(
            command=command,
            config_hash=config_hash(self.config),
            version=self.version,
            seeds={
                "langevin": self.config.langevin.seed,
                "diagnostics": self.config.diagnostics.seed,
                "nosehoover": self.config.nosehoover.seed,
            },
        )
        try:
            await self._commands[command](manifest)
            self.stats["commands_run"] += 1
        except LabError as e:
            self.stats["commands_failed"] += 1
            manifest.status = "error"
            manifest.error = f"{type(e).__name__}: {e}"
            logger.error(f"Command {command} failed in stage {e.stage}: {e}")
            raise
        finally:
            for metrics in self.monitor.metrics_history:
                manifest.add_timing(metrics.stage, metrics.seconds, metrics.rss_mb)
            if self.config.monitoring.prometheus_textfile:
                self.monitor.write_textfile(self.store.path("metrics.prom"))
                self.store.register("metrics.prom")
            manifest.finalize(self.store)
            self.stats["files_written"] = self.store.stats["files"]
        return manifest

    async def _stage(self, name: str, fn: Callable[..., Any], *args: Any, **kwargs: Any) -> Any:
        """Run a synchronous stage off the event loop under the monitor."""
        with self.monitor.stage(name):
            try:
                return await asyncio.to_thread(fn, *args, **kwargs)
            except LabError as e:
                if e.stage is None:
                    e.stage = name
                raise

    def _system(self, command: str) -> System:
        return self.config.build_system(command)

    def _flow(self, command: str) -> FlowField:
        system = self._system(command)
        if not isinstance(system, FlowField):
            raise PreconditionError(f"The {command} command needs a flow, got map {system.name}")
        return system

    def _operator(self, system: System, epsilon: float) -> OperatorMatrix:
        trunc = self.config.truncation_for(epsilon, system.dimension)
        if isinstance(system, MapSystem):
            return assemble_noisy_koopman(system, epsilon, trunc)
        return assemble_flow_generator(system, epsilon, trunc)

    def _solve(self, op: OperatorMatrix, compute_vectors: bool = True) -> ResonanceSet:
        solver = self.config.solver
        arnoldi = solver.method == "arnoldi" or (solver.method == "auto" and op.size > solver.dense_limit)
        if not arnoldi:
            limit = max(solver.dense_limit, op.size) if solver.method == "dense" else solver.dense_limit
            return dense_spectrum(
                op, dense_limit=limit,
                residual_tol=solver.residual_tol, compute_vectors=compute_vectors,
            )
        shift = solver.shift_value
        if shift is None:
            shift = self.config.window.to_window().center
        return shift_invert_arnoldi(
            op, shift, min(solver.count, op.size - 2), tol=solver.tol,
            krylov_dim=solver.krylov_dim, residual_tol=solver.residual_tol,
        )

    def _observables(self, trunc, dimension: int):
        cfg = self.config.correlation
        unit = [1] + [0] * (dimension - 1)
        f = cfg.f.build(trunc, "f") if cfg.f else trig_observable(trunc, [(unit, 1.0, 0.0)], "f")
        g = cfg.g.build(trunc, "g") if cfg.g else trig_observable(trunc, [(unit, 1.0, 0.0)], "g")
        return f, g

    async def cmd_spectrum(self, manifest: RunManifest) -> None:
        system = self._system("spectrum")
        epsilon = self.config.epsilon
        op = await self._stage("assemble", self._operator, system, epsilon)
        spectrum = await self._stage("eigensolve", self._solve, op)

        store = self.store
        assert store is not None
        store.write_resonances("spectrum.csv", spectrum)
        if self.config.export_operator:
            store.write_triplets("operator.txt", op)

        summary: Dict[str, Any] = {
            "system": system.name,
            "kind": op.kind,
            "epsilon": epsilon,
            "K": op.truncation.cutoff,
            "size": op.size,
            "count": len(spectrum),
            "max_residual": float(np.max(spectrum.residuals, initial=0.0)),
            "defective": int(spectrum.defect_flags.sum()),
            "conjugation_violation": conjugate_spectrum_check(op).violation,
            "symmetry_defect": symmetry_defect(spectrum, op.kind),
            "in_window": len(spectrum.restrict(self.config.window.to_window())),
        }
        if op.kind == OperatorKind.FLOW_GENERATOR:
            summary["max_imag"] = float(np.max(spectrum.eigenvalues.imag, initial=-np.inf))
            summary["imaginary_bound"] = imaginary_bound(system)  # type: ignore[arg-type]
        else:
            summary["dropped_mass_bound"] = op.dropped_mass_bound
        store.write_json("spectrum.json", summary)

    async def cmd_sweep(self, manifest: RunManifest) -> None:
        system = self._system("sweep")
        branches = await self._stage(
            "sweep", sweep, system, self.config.schedule.epsilons(),
            self.config.window.to_window(), self.config.policy(), self.executor,
        )
        store = self.store
        assert store is not None
        store.write_csv("branches.csv", branches_frame(branches))
        counts = {s.value: sum(b.status == s for b in branches) for s in BranchStatus}
        store.write_json(
            "limits.json",
            {
                "system": system.name,
                "schedule": self.config.schedule.epsilons(),
                "branches": limits_payload(branches),
                "status_counts": counts,
                "negative_viscosity_limits": mirror_negative_viscosity(branches),
            },
        )

    async def cmd_project(self, manifest: RunManifest) -> None:
        system = self._system("project")
        cfg = self.config.projector
        epsilon = self.config.epsilon
        op = await self._stage("assemble", self._operator, system, epsilon)
        spectrum = await self._stage("eigensolve", dense_spectrum, op, compute_vectors=False)
        center = cfg.center_value
        radius = cfg.radius or auto_radius(spectrum.eigenvalues, center, 1e-8 * one_norm(op.entries))
        projector = await self._stage(
            "projector", contour_projector, op, center, radius, cfg.nodes,
            resonances=spectrum, executor=self.executor,
        )
        oracle = await self._stage("schur_oracle", schur_projector, op, center=center, radius=radius)

        store = self.store
        assert store is not None
        payload: Dict[str, Any] = dict(projector.summary())
        payload.update(
            {
                "epsilon": epsilon,
                "K": op.truncation.cutoff,
                "schur_difference": float(np.linalg.norm(projector.matrix - oracle, 2)),
                "enclosed": [z for z in spectrum.eigenvalues if abs(z - center) < radius],
            }
        )
        if cfg.continuity_epsilon is not None:
            flow = self._flow("project")
            report = await self._stage(
                "continuity", projector_continuity, flow, center, radius, epsilon,
                cfg.continuity_epsilon, op.truncation.cutoff, cfg.nodes, self.executor,
            )
            payload["continuity"] = report
        store.write_json("projector.json", payload)

        if cfg.eigenfunctions and projector.accepted:
            group = await self._stage("eigenfunctions", eigenfunctions, op, projector)
            store.write_csv(
                "eigenfunctions.csv",
                eigenfunction_frame([group], op.truncation),
                {"epsilon": epsilon, "K": op.truncation.cutoff, "defective": group.defective},
            )

    async def cmd_correlate(self, manifest: RunManifest) -> None:
        system = self._system("correlate")
        cfg = self.config.correlation
        epsilon = self.config.epsilon
        op = await self._stage("assemble", self._operator, system, epsilon)
        f, g = self._observables(op.truncation, system.dimension)
        store = self.store
        assert store is not None
        header = {"epsilon": epsilon, "K": op.truncation.cutoff, "f": f.name, "g": g.name}

        if isinstance(system, MapSystem):
            trace = await self._stage(
                "koopman_correlation", koopman_correlation, op, f, g, cfg.koopman_steps, cfg.mean_subtract
            )
            store.write_csv("correlation.csv", trace_frame(trace), header)
            return

        times = cfg.times()
        trace = await self._stage("correlation", correlation, op, f, g, times, cfg.mean_subtract)
        store.write_csv("correlation.csv", trace_frame(trace), header)
        if cfg.expansion_depth is None:
            return

        spectrum = await self._stage("eigensolve", dense_spectrum, op, compute_vectors=False)
        eigendata = await self._stage(
            "eigendata", collect_eigendata, op, spectrum, cfg.expansion_depth, cfg.nodes, self.executor
        )
        expansion, report = await self._stage(
            "expansion", expansion_reconstruct, spectrum, eigendata, f, g, times,
            cfg.expansion_depth, reference=trace,
        )
        store.write_csv("expansion.csv", trace_frame(expansion), dict(header, depth=cfg.expansion_depth))
        store.write_json("expansion.json", dict(header, depth=cfg.expansion_depth, report=report))

    async def cmd_langevin(self, manifest: RunManifest) -> None:
        flow = self._flow("langevin")
        if not flow.on_torus:
            raise PreconditionError(f"The langevin command needs a torus field, got {flow.name}")
        cfg = self.config.langevin
        epsilon = self.config.epsilon
        trunc = self.config.truncation_for(epsilon, flow.dimension)
        f = cfg.observable.build(trunc, "f") if cfg.observable else fourier_mode(
            trunc, [1] + [0] * (flow.dimension - 1), "f"
        )
        x0 = cfg.x0 if cfg.x0 is not None else [0.0] * flow.dimension
        report = await self._stage(
            "monte_carlo", mc_vs_operator, flow, f, epsilon, cfg.times, x0,
            cfg.settings(), cfg.estimate_bias, self.executor,
        )
        store = self.store
        assert store is not None
        header = {
            "seed": cfg.seed, "dt": cfg.dt, "paths": cfg.paths, "epsilon": epsilon,
            "K": trunc.cutoff, "f": f.name,
        }
        store.write_csv("langevin.csv", trace_frame(report.estimate.to_trace()), header)
        store.write_json(
            "langevin.json",
            dict(
                header,
                x0=x0,
                times=report.times,
                operator_values=report.operator_values,
                mc_values=report.mc_values,
                z_re=report.z_re,
                z_im=report.z_im,
                max_abs_z=report.max_abs_z,
                bias_coefficient=report.bias_coefficient,
                excluded_paths=report.estimate.excluded,
            ),
        )

    def _diagnostic_seeds(self, system: System) -> np.ndarray:
        cfg = self.config.diagnostics
        rng = np.random.default_rng(cfg.seed)
        if isinstance(system, MapSystem) or system.on_torus:
            return rng.uniform(0.0, TWO_PI, size=(cfg.seeds, system.dimension))
        return rng.standard_normal(size=(cfg.seeds, system.dimension))

    async def cmd_diagnose(self, manifest: RunManifest) -> None:
        system = self._system("diagnose")
        cfg = self.config.diagnostics
        store = self.store
        assert store is not None
        payload: Dict[str, Any] = {"system": system.name, "epsilon": self.config.epsilon}

        if cfg.gamma0 is not None:
            gamma0 = cfg.gamma0
            payload["gamma0_source"] = "config"
        else:
            report = await self._stage(
                "lyapunov", gamma0_estimate, system, self._diagnostic_seeds(system), cfg.horizon,
                cfg.renorm_every, cfg.dt, cfg.transient, self.executor,
            )
            gamma0 = report.gamma0
            payload["gamma0_source"] = "lyapunov"
            payload["gamma0_spread"] = report.spread
            payload["flagged_seeds"] = report.flagged_seeds
            payload["exponent_sums"] = report.exponents.sum(axis=1)
            store.write_csv(
                "lyapunov.csv", exponents_frame(report.exponents), {"horizon": cfg.horizon, "seed": cfg.seed}
            )
        payload["gamma0"] = gamma0

        if isinstance(system, MapSystem):
            op = await self._stage("assemble", self._operator, system, self.config.epsilon)
            spectrum = await self._stage("eigensolve", self._solve, op, False)
            leading = spectrum.eigenvalues[int(np.argmax(np.abs(spectrum.eigenvalues)))]
            payload.update(
                {
                    "K": op.truncation.cutoff,
                    "leading_eigenvalue": leading,
                    "modulus_gap_count": modulus_gap_count(spectrum, gamma0),
                    "symmetry_defect": symmetry_defect(spectrum, op.kind),
                }
            )
        elif system.on_torus:
            await self._diagnose_flow(system, gamma0, payload)
        else:
            skipped = ["gap", "parabola_count", "truncation_consistency", "semiclassical_disc_count"]
            logger.info(
                f"{system.name} has no Fourier representation; skipped operator diagnostics "
                f"{', '.join(skipped)}"
            )
            payload["skipped"] = skipped
        store.write_json("diagnostics.json", payload)

    async def _diagnose_flow(self, field: FlowField, gamma0: float, payload: Dict[str, Any]) -> None:
        cfg = self.config.diagnostics
        epsilon = self.config.epsilon
        window = self.config.window.to_window()
        branches = await self._stage(
            "sweep", sweep, field, self.config.schedule.epsilons(), window,
            self.config.policy(), self.executor,
        )
        gap = gap_diagnostic(branches, gamma0, cfg.delta, cfg.strip_radius)
        payload["gap"] = gap

        op = await self._stage("assemble", self._operator, field, epsilon)
        spectrum = await self._stage("eigensolve", self._solve, op)
        c0 = calibrated_c0(field, self.config.solver.c0_scale)
        payload.update(
            {
                "K": op.truncation.cutoff,
                "symmetry_defect": symmetry_defect(spectrum, op.kind),
                "max_imag": float(np.max(spectrum.eigenvalues.imag, initial=-np.inf)),
                "imaginary_bound": imaginary_bound(field),
                "c0": c0,
                "parabola_count": parabola_count(spectrum, epsilon, c0),
            }
        )
        if cfg.semiclassical_h is not None:
            payload["semiclassical_disc_count"] = semiclassical_disc_count(
                spectrum, cfg.semiclassical_h, cfg.semiclassical_gamma
            )
        if op.size <= self.config.solver.dense_limit:
            payload["truncation_consistency"] = await self._stage(
                "truncation_consistency", truncation_consistency, field, epsilon,
                op.truncation.cutoff, window, cfg.consistency_step, c0,
            )

    def _section(self, field: FlowField, seeds: np.ndarray) -> SectionCrossings:
        """Section data computed in seed chunks on the pool, merged in seed order."""
        cfg = self.config.nosehoover
        plane = SectionPlane(coordinate=2, level=0.0, direction=1)
        chunks = [seeds[i:i + SECTION_CHUNK] for i in range(0, seeds.shape[0], SECTION_CHUNK)]

        def run(part: np.ndarray) -> SectionCrossings:
            return poincare_section(field, plane, part, cfg.crossings, cfg.dt, cfg.max_time)

        mapper = self.executor.map if self.executor is not None else map
        parts: List[SectionCrossings] = list(mapper(run, chunks))
        offsets = np.cumsum([0] + [c.shape[0] for c in chunks[:-1]])
        return SectionCrossings(
            plane=plane,
            points=np.concatenate([p.points for p in parts], axis=0),
            tags=np.concatenate([p.tags + o for p, o in zip(parts, offsets)]),
            residuals=np.concatenate([p.residuals for p in parts]),
            escaped=[i + int(o) for p, o in zip(parts, offsets) for i in p.escaped],
            incomplete=[i + int(o) for p, o in zip(parts, offsets) for i in p.incomplete],
        )

    async def cmd_nosehoover(self, manifest: RunManifest) -> None:
        cfg = self.config.nosehoover
        field = nose_hoover_field(cfg.kind)
        seeds = axis_seeds(cfg.seeds, cfg.seed_span, axis=1, dimension=3)
        crossings = await self._stage("section", self._section, field, seeds)
        labels = classify_section(crossings, cfg.threshold)
        paired = await self._stage(
            "paired_trajectories", stochastic_vs_deterministic, field, cfg.epsilon,
            cfg.paired_x0, cfg.paired_horizon, cfg.dt, cfg.seed, cfg.record_every,
        )

        store = self.store
        assert store is not None
        header = {"field": field.name, "seeds": cfg.seeds, "crossings": cfg.crossings, "dt": cfg.dt}
        store.write_csv("section.csv", crossings_frame(crossings, labels), header)
        store.write_csv(
            "trajectories.csv",
            trajectories_frame(paired),
            {"epsilon": cfg.epsilon, "seed": cfg.seed, "dt": cfg.dt},
        )
        if cfg.svg:
            store.write_svg("section.svg", crossings.points, crossings.tags, f"{field.name} section x3 = 0")
        classes = sorted(set(labels.values()))
        store.write_json(
            "section.json",
            {
                "field": field.name,
                "seeds": seeds,
                "labels": {str(k): v for k, v in sorted(labels.items())},
                "class_counts": {c: sum(v == c for v in labels.values()) for c in classes},
                "total_crossings": int(crossings.points.shape[0]),
                "escaped": crossings.escaped,
                "incomplete": crossings.incomplete,
                "divergence_time": paired.divergence_time,
                "paired_escaped": paired.escaped,
            },
        )

    def get_status(self) -> Dict[str, Any]:
        return {
            "running": self._running,
            "output_dir": self.config.output_dir,
            "threads": self.config.threads,
            "stats": self.stats.copy(),
        }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viscosity-lab", description="Resonances of chaotic flows via vanishing viscosity"
    )
    parser.add_argument("command", choices=COMMANDS, help="Stage to run")
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--out", default=None, help="Output directory (overrides config)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads")
    parser.add_argument("--seed", type=int, default=None, help="Seed override for stochastic stages")
    parser.add_argument("--log-level", default="INFO", help="Logging level")
    return parser


async def run_command(
    command: str, config: RunConfig, version: str = "0.0.0"
) -> RunManifest:
    lab = ResonanceLab(config, version)
    await lab.start()
    try:
        return await lab.run(command)
    finally:
        await lab.stop()


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Command-line entry point; returns the process exit code."""
    from . import __version__

    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )

    try:
        config = load_run_config(args.config).with_overrides(
            output_dir=args.out, seed=args.seed, threads=args.threads
        )
        manifest = asyncio.run(run_command(args.command, config, __version__))
    except LabError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected failure: {e}")
        return 1
    logger.info(f"{args.command} finished: {len(manifest.files)} files in {config.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
