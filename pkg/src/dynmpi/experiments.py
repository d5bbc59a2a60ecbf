"""Experiment pipeline: config -> models -> simulation -> reconstruction -> metrics."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .acquisition import NoiseModel, add_noise, check_inverse_crime, simulate_dynamic_signal
from .analysis import mass_cov, ssim
from .config import ExperimentConfig
from .core import FlowField, Grid3, ImageSequence, MeasurementSeries, resample_trilinear
from .magnetization import ParticleModel
from .motion import MotionProblem, restrict_flow
from .optim import PdhgParams
from .phantoms import PhantomSpec, render_phantom
from .preprocessing import FrequencySelection, Preprocessed, preprocess
from .recon import ReconProblem, alternate_joint, kaczmarz_sequence, reconstruct_framewise
from .scanner import ScannerModel, SystemMatrix, build_system_matrix

log = logging.getLogger(__name__)

AXES = {"x": 0, "y": 1, "z": 2}


# ---- model construction ---------------------------------------------------


def particle_from(cfg: ExperimentConfig) -> ParticleModel:
    p = cfg.particle
    return ParticleModel.from_physical(p.core_diameter, p.saturation, p.temperature, p.beta or None)


def scanner_from(cfg: ExperimentConfig) -> ScannerModel:
    s = cfg.scanner
    coils = np.eye(3)[:, [AXES[c] for c in s.receive_coils]]
    return ScannerModel(
        gradient=np.asarray(s.gradient, dtype=np.float64),
        drive_amplitudes=tuple(s.drive_amplitudes),
        divisors=tuple(s.divisors),
        base_frequency=s.base_frequency,
        receive_coils=coils,
        particle=particle_from(cfg),
    )


def grids_from(cfg: ExperimentConfig) -> tuple[Grid3, Grid3]:
    """(reconstruction grid, simulation grid), both centered at the origin."""
    g = cfg.grid
    recon = Grid3.centered(tuple(g.dims), tuple(g.voxel_size))
    sim_dims = tuple(d * f for d, f in zip(g.dims, g.sim_factor))
    sim = Grid3.centered(sim_dims, tuple(v / f for v, f in zip(g.voxel_size, g.sim_factor)))
    check_inverse_crime(sim, recon)
    return recon, sim


def phantom_from(cfg: ExperimentConfig) -> PhantomSpec:
    p = cfg.phantom
    return PhantomSpec(
        kind=p.kind,
        radius=p.radius,
        circle_diameter=p.circle_diameter,
        pitch=p.pitch,
        rod_length=p.rod_length,
        rod_width=p.rod_width,
        center=tuple(p.center),
        intensity=p.intensity,
        angular_speed=p.angular_speed,
        rotation_axis=p.rotation_axis,
        velocity=tuple(p.velocity),
    )


def selection_from(cfg: ExperimentConfig) -> FrequencySelection:
    p = cfg.preprocessing
    return FrequencySelection(
        mode=p.selection,
        snr_threshold=p.snr_threshold,
        max_mixing_order=p.max_mixing_order,
        min_frequency=p.min_frequency,
    )


# ---- pipeline stages ------------------------------------------------------


def calibrate(cfg: ExperimentConfig, n_workers: int = 1) -> SystemMatrix:
    recon, _ = grids_from(cfg)
    return build_system_matrix(recon, scanner_from(cfg), n_workers=n_workers)


@dataclass
class Simulation:
    phantom: ImageSequence  # simulation grid
    truth: ImageSequence  # averaged down to the reconstruction grid
    truth_flow: FlowField | None  # reconstruction-grid voxels/frame
    signal: MeasurementSeries  # noise-free time domain


def simulate(cfg: ExperimentConfig) -> Simulation:
    recon, sim = grids_from(cfg)
    seq, flow = render_phantom(phantom_from(cfg), sim, cfg.phantom.frames)
    fac = tuple(Fraction(1, f) for f in cfg.grid.sim_factor)
    truth = ImageSequence(recon, np.stack([resample_trilinear(f, fac, "down_average") for f in seq.data]))
    tflow = None
    if flow is not None:
        tflow = FlowField(recon, np.stack([restrict_flow(v, recon.dims) for v in flow.data]))
    u = simulate_dynamic_signal(seq, scanner_from(cfg))
    return Simulation(seq, truth, tflow, u)


def measure(sim: Simulation, cfg: ExperimentConfig, level: float | None = None) -> MeasurementSeries:
    lvl = cfg.noise.level if level is None else level
    return add_noise(sim.signal, NoiseModel(lvl, seed=cfg.noise.seed, averages=cfg.noise.averages))


def prepare(S: SystemMatrix, u: MeasurementSeries, cfg: ExperimentConfig) -> Preprocessed:
    return preprocess(S, u, selection_from(cfg), divisors=cfg.scanner.divisors, weighting=cfg.preprocessing.weighting)


# ---- reconstruction -------------------------------------------------------


@dataclass
class RunResult:
    algorithm: str
    params: dict
    sequence: ImageSequence
    flow: FlowField | None = None
    objectives: list = field(default_factory=list)
    seconds: float = 0.0


def default_params(cfg: ExperimentConfig, algorithm: str) -> dict:
    r = cfg.recon
    if algorithm == "kaczmarz":
        return {"lambda": r.kaczmarz_lambda, "sweeps": r.kaczmarz_sweeps}
    if algorithm == "spdhg_framewise":
        return {"alpha1": r.alpha1, "alpha2": r.alpha2}
    return {"alpha1": r.alpha1, "alpha2": r.alpha2, "beta": cfg.motion.beta, "gamma": r.gamma}


def _joint_spec(algorithm: str) -> tuple[str, str]:
    _, model, term = algorithm.split("_")
    return {"of": "optical_flow", "mc": "mass_conservation"}[model], term


def run_algorithm(algorithm: str, A: SystemMatrix, d: np.ndarray, cfg: ExperimentConfig, params: dict | None = None) -> RunResult:
    p = dict(default_params(cfg, algorithm), **(params or {}))
    grid, r, t0 = A.grid, cfg.recon, time.perf_counter()
    if algorithm == "kaczmarz":
        seq = kaczmarz_sequence(A, d, grid, float(p["lambda"]), int(p["sweeps"]), positivity=True)
        return RunResult(algorithm, p, seq, seconds=time.perf_counter() - t0)
    problem = ReconProblem(
        alpha1=p["alpha1"], alpha2=p["alpha2"], batches=r.batches, iters=r.iters,
        alternations=r.alternations, nonnegative=r.nonnegative, seed=r.seed,
    )
    if algorithm == "spdhg_framewise":
        res = reconstruct_framewise(A, d, grid, replace(problem, iters=r.framewise_iters))
        return RunResult(algorithm, p, res.sequence, objectives=[res.objective], seconds=time.perf_counter() - t0)
    model, term = _joint_spec(algorithm)
    problem = replace(problem, data_term=term, gamma=p["gamma"], motion_model=model)
    m = cfg.motion
    motion = MotionProblem(
        model=model, flow_regularizer=m.regularizer, beta=p["beta"], gamma=p["gamma"],
        pyramid_levels=m.pyramid_levels or None, scale_factor=m.scale_factor, warps=m.warps,
    )
    res = alternate_joint(d, A, grid, problem, motion, init=r.init, motion_params=PdhgParams(max_iters=m.iters))
    return RunResult(algorithm, p, res.sequence, res.flow, list(res.objectives), time.perf_counter() - t0)


# ---- sweeps ---------------------------------------------------------------


def sweep_grid(cfg: ExperimentConfig, algorithm: str) -> list[dict]:
    s = cfg.sweep
    if algorithm == "kaczmarz":
        axes = {"lambda": s.kaczmarz_lambda, "sweeps": s.kaczmarz_sweeps}
    elif algorithm == "spdhg_framewise":
        axes = {"alpha1": s.framewise_alpha1, "alpha2": s.framewise_alpha2}
    else:
        axes = {"alpha1": s.alpha1, "alpha2": s.alpha2, "beta": s.beta, "gamma": s.gamma}
    keys = list(axes)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(axes[k] for k in keys))]


@dataclass
class SweepEntry:
    algorithm: str
    params: dict
    ssim: float
    mass_cov: float
    objectives: list
    seconds: float


def score(run: RunResult, truth: ImageSequence) -> SweepEntry:
    try:
        cov = mass_cov(run.sequence)
    except ValueError:
        cov = float("inf")
    return SweepEntry(run.algorithm, run.params, ssim(run.sequence, truth).mean, cov, run.objectives, run.seconds)


def sweep_algorithm(algorithm: str, A, d, truth, cfg: ExperimentConfig, grid: list[dict] | None = None):
    """All grid points ranked by SSIM (best first) plus the best run itself."""
    entries, best_run = [], None
    for params in grid or sweep_grid(cfg, algorithm):
        run = run_algorithm(algorithm, A, d, cfg, params)
        e = score(run, truth)
        log.info("%s %s ssim=%.4f cov=%.4f (%.1fs)", algorithm, params, e.ssim, e.mass_cov, e.seconds)
        if best_run is None or e.ssim > max(x.ssim for x in entries):
            best_run = run
        entries.append(e)
    ranked = sorted(entries, key=lambda e: -e.ssim)
    return ranked, best_run


@dataclass
class NoiseStudy:
    """Per noise level and algorithm: ranked sweep entries and the best run."""

    ranked: dict = field(default_factory=dict)  # level -> algorithm -> [SweepEntry]
    best: dict = field(default_factory=dict)  # level -> algorithm -> RunResult

    def best_ssim(self) -> dict:
        return {lvl: {a: r[0].ssim for a, r in algos.items()} for lvl, algos in self.ranked.items()}

    def best_cov(self) -> dict:
        return {lvl: {a: r[0].mass_cov for a, r in algos.items()} for lvl, algos in self.ranked.items()}


def noise_study(cfg: ExperimentConfig, S: SystemMatrix | None = None, sim: Simulation | None = None, levels=None, algorithms=None) -> NoiseStudy:
    """Sweep every algorithm at every noise level; one seeded realization per level."""
    S = S if S is not None else calibrate(cfg)
    sim = sim or simulate(cfg)
    out = NoiseStudy()
    for lvl in levels if levels is not None else cfg.noise.levels:
        pp = prepare(S, measure(sim, cfg, lvl), cfg)
        out.ranked[lvl], out.best[lvl] = {}, {}
        for algo in algorithms or cfg.sweep.algorithms:
            ranked, run = sweep_algorithm(algo, pp.matrix, pp.data.data, sim.truth, cfg)
            out.ranked[lvl][algo], out.best[lvl][algo] = ranked, run
    return out


def format_manifest(ranked: list[SweepEntry]) -> str:
    lines = ["rank algorithm ssim mass_cov seconds params"]
    for i, e in enumerate(ranked, 1):
        ps = " ".join(f"{k}={v:g}" for k, v in e.params.items())
        lines.append(f"{i} {e.algorithm} {e.ssim:.6f} {e.mass_cov:.6f} {e.seconds:.2f} {ps}")
    return "\n".join(lines) + "\n"
