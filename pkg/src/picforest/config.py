"""Run configuration: `section.key = value` text files and validation."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

SCENARIOS = ("circular_flow", "adaptive_interface", "convergence")
GENERATORS = ("random", "reference", "prescribed")
INTEGRATORS = ("euler", "rk2", "rk4")
FIELDS = ("gyre", "rotation", "constant", "shear")
GEOMETRIES = ("rectangle", "annulus")


class ConfigError(Exception):
    pass


@dataclass
class RunConfig:
    # run
    scenario: str = "circular_flow"
    steps: int = 100
    ranks: int = 1
    seed: int = 0
    cfl: float = 0.5
    integrator: str = "rk2"
    # mesh
    mesh_nx: int = 16
    mesh_ny: int = 16
    mesh_geometry: str = "rectangle"
    mesh_extent: tuple = (0.0, 1.0, 0.0, 1.0)  # x0,x1,y0,y1 or r0,r1 ignored y
    mesh_refine_depth: int = 0
    mesh_interface_amplitude: float = 0.15
    # velocity
    velocity_kind: str = "gyre"
    velocity_amplitude: float = 1.0
    velocity_omega: float = 1.0
    velocity_center: tuple = (0.5, 0.5)
    velocity_discretize: bool = False
    # generator
    generator_kind: str = "random"
    generator_count: int = 10000
    generator_per_cell: int = 4
    generator_file: str = ""
    # partition
    partition_weight: float = 0.0
    partition_cadence: int = 10
    # properties / interpolation
    properties_plugins: tuple = ()
    properties_params: dict = field(default_factory=dict)
    interpolation_scheme: str = "arithmetic_mean"
    interpolation_property: str = ""
    # output
    output_cadence: int = 10
    output_groups: int = 1
    output_binary: bool = True

    def validate(self) -> "RunConfig":
        def expect(name, value, options):
            if value not in options:
                raise ConfigError(
                    f"{name}: {value!r} is not one of {sorted(options)}"
                )

        expect("run.scenario", self.scenario, SCENARIOS)
        expect("run.integrator", self.integrator, INTEGRATORS)
        expect("mesh.geometry", self.mesh_geometry, GEOMETRIES)
        expect("velocity.kind", self.velocity_kind, FIELDS)
        expect("generator.kind", self.generator_kind, GENERATORS)
        from .properties import INTERPOLATION_SCHEMES, PLUGIN_FACTORIES

        expect("interpolation.scheme", self.interpolation_scheme,
               INTERPOLATION_SCHEMES)
        for name in self.properties_plugins:
            expect("properties.plugins", name, tuple(PLUGIN_FACTORIES))
        for name, low in [
            ("run.steps", 0), ("run.ranks", 1), ("mesh.nx", 1), ("mesh.ny", 1),
            ("generator.count", 0), ("generator.per_cell", 1),
            ("partition.cadence", 1), ("output.cadence", 1), ("output.groups", 1),
            ("mesh.refine_depth", 0),
        ]:
            attr = name.replace(".", "_").replace("run_", "")
            if getattr(self, attr) < low:
                raise ConfigError(f"{name}: must be >= {low}")
        if self.cfl <= 0:
            raise ConfigError("run.cfl: must be positive")
        if self.partition_weight < 0:
            raise ConfigError("partition.weight: must be >= 0")
        if self.generator_kind == "prescribed" and not self.generator_file:
            raise ConfigError("generator.file: required for the prescribed generator")
        return self


_KEY_MAP = {
    "run.scenario": ("scenario", str),
    "run.steps": ("steps", int),
    "run.ranks": ("ranks", int),
    "run.seed": ("seed", int),
    "run.cfl": ("cfl", float),
    "run.integrator": ("integrator", str),
    "mesh.nx": ("mesh_nx", int),
    "mesh.ny": ("mesh_ny", int),
    "mesh.geometry": ("mesh_geometry", str),
    "mesh.extent": ("mesh_extent", "floats"),
    "mesh.refine_depth": ("mesh_refine_depth", int),
    "mesh.interface_amplitude": ("mesh_interface_amplitude", float),
    "velocity.kind": ("velocity_kind", str),
    "velocity.amplitude": ("velocity_amplitude", float),
    "velocity.omega": ("velocity_omega", float),
    "velocity.center": ("velocity_center", "floats"),
    "velocity.discretize": ("velocity_discretize", "bool"),
    "generator.kind": ("generator_kind", str),
    "generator.count": ("generator_count", int),
    "generator.per_cell": ("generator_per_cell", int),
    "generator.file": ("generator_file", str),
    "partition.weight": ("partition_weight", float),
    "partition.cadence": ("partition_cadence", int),
    "properties.plugins": ("properties_plugins", "names"),
    "interpolation.scheme": ("interpolation_scheme", str),
    "interpolation.property": ("interpolation_property", str),
    "output.cadence": ("output_cadence", int),
    "output.groups": ("output_groups", int),
    "output.binary": ("output_binary", "bool"),
}


def _convert(key: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "bool":
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "floats":
            return tuple(float(p) for p in raw.replace(",", " ").split())
        if kind == "names":
            return tuple(p for p in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r}") from None
    raise ConfigError(f"{key}: unknown value kind")  # pragma: no cover


def parse_config(text: str) -> RunConfig:
    """Parse `section.key = value` lines ('#' comments, blank lines ignored)."""
    values = {}
    params = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key.startswith("properties.") and key not in _KEY_MAP:
            # per-plugin parameters, e.g. properties.damage_alpha = 1.0
            params[key.split(".", 1)[1]] = float(raw)
            continue
        if key not in _KEY_MAP:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        attr, kind = _KEY_MAP[key]
        values[attr] = _convert(key, kind, raw)
    cfg = RunConfig(**values)
    cfg.properties_params.update(params)
    return cfg.validate()


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Config echo in the same grammar, for provenance in output directories."""
    reverse = {attr: key for key, (attr, _) in _KEY_MAP.items()}
    lines = []
    for f in fields(cfg):
        if f.name == "properties_params":
            continue
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{reverse[f.name]} = {value}")
    for name, value in sorted(cfg.properties_params.items()):
        lines.append(f"properties.{name} = {value}")
    return "\n".join(lines) + "\n"
