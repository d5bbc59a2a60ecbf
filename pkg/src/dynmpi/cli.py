"""Command-line pipeline: calibrate -> simulate -> preprocess -> reconstruct -> metrics.

Every output is a core-format array with a ``.meta`` sidecar naming the
config hash and the SHA-256 of each input file, so ``metrics`` can verify
the whole provenance chain before scoring.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import mass_cov, metrics_table, ssim
from .config import ALGORITHMS, ConfigError, ExperimentConfig, load_config
from .core import (
    FREQUENCY_SPLIT,
    TIME_DOMAIN,
    ImageSequence,
    MeasurementSeries,
    grid_from_meta,
    grid_meta,
    load_array,
    read_sidecar,
    save_array,
    sidecar_path,
    write_sidecar,
)
from .experiments import calibrate, format_manifest, measure, noise_study, prepare, run_algorithm, simulate
from .optim import NumericalFailure
from .scanner import load_system_matrix

log = logging.getLogger("dynmpi")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

SYSTEM_MATRIX = "system_matrix.bin"
PHANTOM = "phantom.bin"
TRUTH = "truth.bin"
TRUTH_FLOW = "truth_flow.bin"
MEASUREMENTS = "measurements.bin"
PP_MATRIX = "pp_matrix.bin"
PP_DATA = "pp_data.bin"


class InputError(RuntimeError):
    """Missing or inconsistent upstream artifact."""


def digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Context:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg, self.out = cfg, out
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name) -> Path:
        return self.out / name

    def need(self, *names) -> list[Path]:
        paths = [self.path(n) for n in names]
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            raise InputError(f"missing inputs: {', '.join(missing)}")
        return paths

    def provenance(self, command: str, inputs=()) -> dict:
        return {
            "command": command,
            "config_name": self.cfg.name,
            "config_hash": self.cfg.hash,
            "producer": f"dynmpi {__version__}",
            "inputs": ";".join(f"{Path(p).name}:{digest(p)}" for p in inputs) or "none",
        }

    def save(self, name, array, meta: dict):
        a = np.asarray(array, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise NumericalFailure(-1, f"output {name}")
        path = self.path(name)
        save_array(path, a)
        write_sidecar(sidecar_path(path), meta)
        return path


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericalFailure(-1, "output")


# ---- commands -------------------------------------------------------------


def cmd_calibrate(ctx: Context) -> list[Path]:
    S = calibrate(ctx.cfg)
    _check_finite(S.rows)
    path = ctx.path(SYSTEM_MATRIX)
    S.save(path, ctx.provenance("calibrate"))
    return [path]


def cmd_simulate(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    sim = simulate(cfg)
    u = measure(sim, cfg)
    prov = ctx.provenance("simulate")
    out = [
        ctx.save(PHANTOM, sim.phantom.data, {**prov, **grid_meta(sim.phantom.grid)}),
        ctx.save(TRUTH, sim.truth.data, {**prov, **grid_meta(sim.truth.grid)}),
    ]
    if sim.truth_flow is not None:
        out.append(ctx.save(TRUTH_FLOW, sim.truth_flow.data, {**prov, **grid_meta(sim.truth_flow.grid)}))
    meta = {k: v for k, v in u.meta.items()}
    meta.update(prov, domain_tag=u.domain_tag, truth_sha256=digest(out[1]))
    out.append(ctx.save(MEASUREMENTS, u.data, meta))
    return out


def cmd_preprocess(ctx: Context) -> list[Path]:
    s_path, u_path = ctx.need(SYSTEM_MATRIX, MEASUREMENTS)
    S = load_system_matrix(s_path)
    umeta = read_sidecar(sidecar_path(u_path))
    u = MeasurementSeries(load_array(u_path), umeta.get("domain_tag", TIME_DOMAIN))
    if u.n_rows != S.n_rows:
        raise InputError(f"{u_path.name} has {u.n_rows} rows per frame but {s_path.name} has {S.n_rows}")
    pp = prepare(S, u, ctx.cfg)
    prov = ctx.provenance("preprocess", [s_path, u_path])
    m_path = ctx.path(PP_MATRIX)
    pp.matrix.save(m_path, {**prov, "n_dropped": pp.n_dropped})
    d_path = ctx.save(PP_DATA, pp.data.data, {**prov, "domain_tag": FREQUENCY_SPLIT, "truth_sha256": umeta.get("truth_sha256", "")})
    return [m_path, d_path]


def _load_preprocessed(ctx: Context):
    m_path, d_path = ctx.need(PP_MATRIX, PP_DATA)
    return load_system_matrix(m_path), load_array(d_path), [m_path, d_path]


def cmd_reconstruct(ctx: Context, algorithm: str | None = None) -> list[Path]:
    algorithm = algorithm or ctx.cfg.recon.algorithm
    if algorithm not in ALGORITHMS:
        raise ConfigError("recon.algorithm", f"unknown algorithm {algorithm!r}")
    A, d, inputs = _load_preprocessed(ctx)
    run = run_algorithm(algorithm, A, d, ctx.cfg)
    prov = ctx.provenance("reconstruct", inputs)
    meta = {**prov, **grid_meta(A.grid), "algorithm": algorithm, "seconds": run.seconds}
    meta.update({f"param.{k}": v for k, v in run.params.items()})
    if run.objectives:
        meta["objectives"] = run.objectives
    out = [ctx.save(f"recon_{algorithm}.bin", run.sequence.data, meta)]
    if run.flow is not None:
        out.append(ctx.save(f"flow_{algorithm}.bin", run.flow.data, meta))
    return out


def _verify_chain(path: Path, truth_sha: str) -> None:
    """Each recorded input must still exist with the recorded digest."""
    meta = read_sidecar(sidecar_path(path))
    if "truth_sha256" in meta and meta["truth_sha256"] and meta["truth_sha256"] != truth_sha:
        raise InputError(f"{path.name} was derived from a different simulation than {TRUTH}")
    inputs = meta.get("inputs", "none")
    if inputs == "none":
        return
    for item in inputs.split(";"):
        name, _, sha = item.partition(":")
        p = path.parent / name
        if not p.exists():
            raise InputError(f"{path.name} names missing input {name}")
        if digest(p) != sha:
            raise InputError(f"provenance mismatch: {name} changed after {path.name} was produced")
        _verify_chain(p, truth_sha)


def cmd_metrics(ctx: Context) -> list[Path]:
    (t_path,) = ctx.need(TRUTH)
    tmeta = read_sidecar(sidecar_path(t_path))
    truth = ImageSequence(grid_from_meta(tmeta), load_array(t_path))
    truth_sha = digest(t_path)
    recons = sorted(ctx.out.glob("recon_*.bin"))
    if not recons:
        raise InputError(f"no recon_*.bin files in {ctx.out}")
    lines = ["algorithm ssim mass_cov"]
    for p in recons:
        _verify_chain(p, truth_sha)
        meta = read_sidecar(sidecar_path(p))
        c = ImageSequence(grid_from_meta(meta), load_array(p))
        if c.data.shape != truth.data.shape:
            raise InputError(f"{p.name} shape {c.data.shape} does not match truth {truth.data.shape}")
        try:
            cov = mass_cov(c)
        except ValueError:
            cov = float("inf")
        lines.append(f"{meta['algorithm']} {ssim(c, truth).mean:.6f} {cov:.6f}")
    umeta = read_sidecar(sidecar_path(ctx.path(MEASUREMENTS))) if ctx.path(MEASUREMENTS).exists() else {}
    level = umeta.get("noise_level", "?")
    out = ctx.path("metrics.txt")
    out.write_text(f"# config_hash = {ctx.cfg.hash}\n# noise_level = {level}\n" + "\n".join(lines) + "\n")
    return [out]


def cmd_sweep(ctx: Context) -> list[Path]:
    cfg = ctx.cfg
    S_path = ctx.path(SYSTEM_MATRIX)
    S = load_system_matrix(S_path) if S_path.exists() else None
    study = noise_study(cfg, S=S)
    entries = []
    for lvl, algos in study.ranked.items():
        for ranked in algos.values():
            entries.extend((lvl, e) for e in ranked)
    entries.sort(key=lambda t: -t[1].ssim)
    lines = [f"# config_hash = {cfg.hash}", "rank noise algorithm ssim mass_cov seconds params"]
    for i, (lvl, e) in enumerate(entries, 1):
        ps = " ".join(f"{k}={v:g}" for k, v in e.params.items())
        lines.append(f"{i} {lvl:g} {e.algorithm} {e.ssim:.6f} {e.mass_cov:.6f} {e.seconds:.2f} {ps}")
    manifest = ctx.path("sweep_manifest.txt")
    manifest.write_text("\n".join(lines) + "\n")
    per_algo = ctx.path("sweep_best.txt")
    blocks = [f"# config_hash = {cfg.hash}", "## best SSIM", metrics_table(study.best_ssim()).rstrip(),
              "## mass CoV of the best-SSIM run", metrics_table(study.best_cov()).rstrip()]
    for lvl, algos in study.ranked.items():
        for a, ranked in algos.items():
            blocks.append(f"## noise {lvl:g} {a}")
            blocks.append(format_manifest(ranked).rstrip())
    per_algo.write_text("\n".join(blocks) + "\n")
    return [manifest, per_algo]


COMMANDS = {
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "preprocess": cmd_preprocess,
    "reconstruct": cmd_reconstruct,
    "metrics": cmd_metrics,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynmpi", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"dynmpi {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="config file or bundled name (desk2d, sim3d-appendixC)")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--seed", type=int, default=None, help="sets noise.seed and recon.seed")
        p.add_argument("--out", default=None, help="output directory (default: paths.out)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "reconstruct":
            p.add_argument("--algorithm", choices=ALGORITHMS, default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        warnings.simplefilter("ignore")
    try:
        return _run(args)
    except (NumericalFailure, FloatingPointError) as exc:
        print(f"dynmpi {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def _run(args) -> int:
    try:
        overrides = list(args.override)
        if args.seed is not None:
            overrides += [f"noise.seed={args.seed}", f"recon.seed={args.seed}"]
        cfg = load_config(args.config, overrides)
        ctx = Context(cfg, Path(args.out or cfg.paths.out))
        fn = COMMANDS[args.command]
        paths = fn(ctx, args.algorithm) if args.command == "reconstruct" else fn(ctx)
    except (ConfigError, InputError, ValueError) as exc:
        print(f"dynmpi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for p in paths:
        print(p)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
