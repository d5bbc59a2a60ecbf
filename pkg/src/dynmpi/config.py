"""Plain-text experiment configuration: ``section.key = value`` lines.

Values are parsed against the type of the matching dataclass field; tuples
are comma separated.  ``#`` starts a comment.  The canonical form (sorted,
fully resolved keys) is hashed for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

BUNDLED = ("desk2d", "sim3d-appendixC")


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending key path."""

    def __init__(self, key: str, msg: str):
        super().__init__(f"{key}: {msg}")
        self.key = key


@dataclass
class ScannerSection:
    gradient: tuple[float, ...] = (0.5, 0.5, 1.0)  # T/m/mu0
    drive_amplitudes: tuple[float, ...] = (0.014, 0.014, 0.014)  # T/mu0
    divisors: tuple[int, ...] = (102, 96, 99)
    base_frequency: float = 2.5e6  # Hz, also the sample rate
    receive_coils: tuple[str, ...] = ("x", "y", "z")


@dataclass
class ParticleSection:
    core_diameter: float = 2e-8
    saturation: float = 0.6  # T/mu0
    temperature: float = 293.0
    beta: float = 0.0  # 0 -> derived from the constants above


@dataclass
class GridSection:
    dims: tuple[int, ...] = (20, 20, 20)
    voxel_size: tuple[float, ...] = (2e-3, 2e-3, 1e-3)
    sim_factor: tuple[int, ...] = (2, 2, 2)  # simulation grid refinement per axis


@dataclass
class PhantomSection:
    kind: str = "spiral_ball"
    frames: int = 10
    radius: float = 2e-3
    circle_diameter: float = 11.5e-3
    pitch: float = 0.0
    rod_length: float = 15e-3
    rod_width: float = 1.3e-3
    center: tuple[float, ...] = (0.0, 0.0, 0.0)
    intensity: float = 1.0
    angular_speed: float = 0.4
    rotation_axis: int = 2
    velocity: tuple[float, ...] = (0.0, 0.0, 0.0)


@dataclass
class NoiseSection:
    level: float = 0.5
    levels: tuple[float, ...] = (0.0, 0.5, 1.0)
    seed: int = 1
    averages: int = 1


@dataclass
class PreprocessingSection:
    selection: str = "mixing_order"
    max_mixing_order: int = 8
    snr_threshold: float = 5.0
    min_frequency: float = 0.0
    weighting: str = "row_norm"


@dataclass
class ReconSection:
    algorithm: str = "joint_of_l1"
    kaczmarz_lambda: float = 1e3
    kaczmarz_sweeps: int = 3
    alpha1: float = 1e-2
    alpha2: float = 1e-7
    gamma: float = 1e-4
    batches: int = 3
    iters: int = 100
    framewise_iters: int = 2000
    alternations: int = 3
    nonnegative: bool = False
    init: str = "framewise_warmstart"
    seed: int = 0


@dataclass
class MotionSection:
    regularizer: str = "tv_l1"
    beta: float = 0.1
    iters: int = 100
    warps: int = 2
    scale_factor: float = 0.5
    pyramid_levels: int = 0  # 0 -> automatic


@dataclass
class SweepSection:
    """Log grids per parameter; the defaults span the documented search area."""

    algorithms: tuple[str, ...] = ("kaczmarz", "spdhg_framewise", "joint_of_l1", "joint_mc_l1")
    kaczmarz_lambda: tuple[float, ...] = (1e-5, 1e-3, 1e-1, 10.0, 1e3)
    kaczmarz_sweeps: tuple[int, ...] = (1, 3, 10)
    framewise_alpha1: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    framewise_alpha2: tuple[float, ...] = (1e-9, 1e-7, 1e-5)
    alpha1: tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    alpha2: tuple[float, ...] = (1e-8, 1e-7, 1e-6, 1e-5)
    beta: tuple[float, ...] = (1e-2, 1e-1, 1.0)
    gamma: tuple[float, ...] = (1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)


@dataclass
class PathsSection:
    out: str = "runs"


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    scanner: ScannerSection = field(default_factory=ScannerSection)
    particle: ParticleSection = field(default_factory=ParticleSection)
    grid: GridSection = field(default_factory=GridSection)
    phantom: PhantomSection = field(default_factory=PhantomSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    preprocessing: PreprocessingSection = field(default_factory=PreprocessingSection)
    recon: ReconSection = field(default_factory=ReconSection)
    motion: MotionSection = field(default_factory=MotionSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_text(self) -> str:
        """Canonical text: every key, sorted, one per line."""
        lines = [f"name = {self.name}"]
        for sec in sorted(f.name for f in dataclasses.fields(self) if f.name != "name"):
            obj = getattr(self, sec)
            for f in sorted(dataclasses.fields(obj), key=lambda f: f.name):
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_scalar(key, text: str, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if typ is int:
            f = float(text)
            if f != int(f):
                raise ValueError(text)
            return int(f)
        if typ is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {typ.__name__}") from None


def _parse_value(key, text: str, typ):
    if typing.get_origin(typ) is tuple:
        inner = typing.get_args(typ)[0]
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_parse_scalar(key, p, inner) for p in parts)
    return _parse_scalar(key, text, typ)


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}", f"expected 'section.key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(key, f"duplicate key ({source}:{n})")
        out[key] = val
    return out


def build_config(entries: dict[str, str]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for key, val in entries.items():
        if key == "name":
            cfg.name = val
            continue
        sec, _, name = key.partition(".")
        if sec not in sections or sec == "name" or not name:
            raise ConfigError(key, "unknown section")
        obj = getattr(cfg, sec)
        hints = typing.get_type_hints(type(obj))
        if name not in hints:
            raise ConfigError(key, "unknown key")
        setattr(obj, name, _parse_value(key, val, hints[name]))
    validate(cfg)
    return cfg


ALGORITHMS = ("kaczmarz", "spdhg_framewise", "joint_of_l1", "joint_of_l2", "joint_mc_l1", "joint_mc_l2")


def validate(cfg: ExperimentConfig) -> None:
    s, g = cfg.scanner, cfg.grid
    if len(s.gradient) != 3:
        raise ConfigError("scanner.gradient", "needs three entries")
    if len(s.drive_amplitudes) != len(s.divisors) or not 1 <= len(s.divisors) <= 3:
        raise ConfigError("scanner.divisors", "needs 1-3 entries matching scanner.drive_amplitudes")
    if any(d < 1 for d in s.divisors):
        raise ConfigError("scanner.divisors", "must be positive")
    if not s.receive_coils or any(c not in "xyz" or len(c) != 1 for c in s.receive_coils):
        raise ConfigError("scanner.receive_coils", "entries must be x, y or z")
    for key, val in (("grid.dims", g.dims), ("grid.voxel_size", g.voxel_size), ("grid.sim_factor", g.sim_factor)):
        if len(val) != 3 or any(x <= 0 for x in val):
            raise ConfigError(key, "needs three positive entries")
    if cfg.phantom.frames < 1:
        raise ConfigError("phantom.frames", "must be >= 1")
    if cfg.noise.level < 0 or any(x < 0 for x in cfg.noise.levels):
        raise ConfigError("noise.level", "must be >= 0")
    if cfg.noise.averages < 1:
        raise ConfigError("noise.averages", "must be >= 1")
    if cfg.preprocessing.selection not in ("snr_threshold", "mixing_order", "band_only"):
        raise ConfigError("preprocessing.selection", f"unknown mode {cfg.preprocessing.selection!r}")
    if cfg.preprocessing.weighting not in ("row_norm", "global", "none"):
        raise ConfigError("preprocessing.weighting", f"unknown weighting {cfg.preprocessing.weighting!r}")
    if cfg.recon.algorithm not in ALGORITHMS:
        raise ConfigError("recon.algorithm", f"unknown algorithm {cfg.recon.algorithm!r}")
    for a in cfg.sweep.algorithms:
        if a not in ALGORITHMS:
            raise ConfigError("sweep.algorithms", f"unknown algorithm {a!r}")
    if cfg.recon.init not in ("zeros", "framewise_warmstart"):
        raise ConfigError("recon.init", f"unknown init {cfg.recon.init!r}")
    if cfg.motion.regularizer not in ("tv_l1", "grad_l2", "l2_tikhonov"):
        raise ConfigError("motion.regularizer", f"unknown regularizer {cfg.motion.regularizer!r}")


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError("config", f"no bundled config {name!r}; available: {', '.join(BUNDLED)}")
    return Path(str(resources.files("dynmpi") / "configs" / f"{name}.cfg"))


def load_config(source: str | Path, overrides: typing.Iterable[str] = ()) -> ExperimentConfig:
    """Load a config file (or bundled name) and apply ``section.key=value`` overrides."""
    p = Path(source)
    if not p.exists():
        if str(source) in BUNDLED:
            p = bundled_path(str(source))
        else:
            raise ConfigError("config", f"file not found: {source}")
    entries = parse_lines(p.read_text(), str(p))
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(ov, "override must read section.key=value")
        k, v = (s.strip() for s in ov.split("=", 1))
        entries[k] = v
    return build_config(entries)
