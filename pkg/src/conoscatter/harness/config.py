"""INI experiment configuration.

Every section maps onto one dataclass; unknown sections or keys and values
that fail to parse raise :class:`ConfigInvalid` naming ``section.key``.
Resolution relations between the potential grid, the pulse and the
``s``-grid are checked at load time.
"""

import configparser
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from ..errors import ConfigInvalid
from ..geom import NestedPair
from ..potential import (FOURIER_SYMBOL, MODEL_PROFILE, Amplitude, Grid, PotentialSpec,
                         admissible_orders)
from ..scatter import DataSliceSpec
from ..wavefield import SUPPORT_WIDTHS, SourcePulse

logger = logging.getLogger(__name__)

PRIMITIVES = ("none", "plane", "line-in-plane", "sphere", "sphere+equator")


@dataclass
class ScenarioSection:
    name: str = "unnamed"
    seed: int = 0
    out: str = "conoscatter_out"
    threads: int = 1


@dataclass
class GeometrySection:
    primitive: str = "none"
    radius: float = 0.5
    center: tuple = (0.0, 0.0, 0.0)
    normal: tuple = (0.0, 0.0, 1.0)
    offset: float = 0.0
    height: float = 0.0
    line_offset: float = 0.0


@dataclass
class PotentialSection:
    profile: str = MODEL_PROFILE
    model: str = "delta"
    M1: float = -1.0
    M2: float = 0.0
    mollify_scale: float = 0.05
    low_cut: float = 0.0
    scale: float = 1.0
    support_radius: float = 0.75
    taper: float = 0.6
    box_half_width: float = 4.0
    enforce_admissibility: bool = True
    grid_n: int = 64
    grid_half_width: float = 0.75


@dataclass
class WavefieldSection:
    epsilon: float = 0.1
    probes: int = 4
    receiver_radius: float = 4.0


@dataclass
class ScatterSection:
    route: str = "friedlander"
    level: int = 2
    ds: float = 0.0  # 0 selects eps / 4
    slice: str = "backscatter"
    angle_deg: float = 10.0
    axis: tuple = (0.0, 1.0, 0.0)
    tangency_tol: float = 0.1


@dataclass
class ReconstructSection:
    calibration_c: float = 0.5
    rel_floor: float = 0.02
    noise_floor_k: float = 3.0
    exclude_tangential: bool = True
    tangency_tol: float = 0.1
    exclude_nonspecular: bool = True
    specular_tol: float = 0.0  # 0 selects half the direction-grid spacing
    classify: str = "geometry"
    min_confidence: float = 0.0
    tolerance_cells: float = 2.0
    separation: float = 0.4


@dataclass
class GeometrySuiteSection:
    certificates: int = 0
    multiphase_grid: int = 0
    prop71_samples: int = 0


SECTIONS = {
    "scenario": ScenarioSection,
    "geometry": GeometrySection,
    "potential": PotentialSection,
    "wavefield": WavefieldSection,
    "scatter": ScatterSection,
    "reconstruct": ReconstructSection,
    "geometry_suite": GeometrySuiteSection,
}


def _parse(raw, default, path):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            val = float(raw)
            if not np.isfinite(val):
                raise ValueError("must be finite")
            return val
        if isinstance(default, tuple):
            parts = [float(p) for p in raw.replace(",", " ").split()]
            if len(parts) != len(default):
                raise ValueError(f"expected {len(default)} numbers")
            return tuple(parts)
        return raw.strip()
    except ValueError as exc:
        raise ConfigInvalid(path, str(exc)) from None


@dataclass
class ExperimentConfig:
    """Parsed experiment configuration.

    An empty file gives an empty ``sections`` set; stages then treat the run
    as a no-op.
    """

    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    potential: PotentialSection = field(default_factory=PotentialSection)
    wavefield: WavefieldSection = field(default_factory=WavefieldSection)
    scatter: ScatterSection = field(default_factory=ScatterSection)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    geometry_suite: GeometrySuiteSection = field(default_factory=GeometrySuiteSection)
    sections: frozenset = frozenset()
    source: str = ""

    # construction

    @classmethod
    def from_string(cls, text, source="<string>"):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigInvalid("<file>", str(exc).splitlines()[0]) from None
        kwargs = {}
        for name in parser.sections():
            if name not in SECTIONS:
                raise ConfigInvalid(name, "unknown section")
            klass = SECTIONS[name]
            defaults = klass()
            known = {f.name: f for f in fields(klass)}
            values = {}
            for key, raw in parser.items(name):
                if key not in known:
                    raise ConfigInvalid(f"{name}.{key}", "unknown key")
                values[key] = _parse(raw, getattr(defaults, key), f"{name}.{key}")
            kwargs[name] = klass(**values)
        cfg = cls(**kwargs, sections=frozenset(parser.sections()), source=source)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigInvalid("<file>", f"cannot read {path}: {exc.strerror}") from None
        return cls.from_string(text, source=str(path))

    def with_overrides(self, seed=None, out=None, threads=None):
        """Copy with command-line overrides applied to ``[scenario]``."""
        sc = ScenarioSection(**asdict(self.scenario))
        if seed is not None:
            sc.seed = int(seed)
        if out is not None:
            sc.out = str(out)
        if threads is not None:
            sc.threads = int(threads)
        d = {name: getattr(self, name) for name in SECTIONS}
        d["scenario"] = sc
        return ExperimentConfig(**d, sections=self.sections | {"scenario"}, source=self.source)

    # validation

    def check(self):
        g, p, w, s, r = self.geometry, self.potential, self.wavefield, self.scatter, self.reconstruct
        if g.primitive not in PRIMITIVES:
            raise ConfigInvalid("geometry.primitive", f"expected one of {PRIMITIVES}")
        if g.primitive in ("sphere", "sphere+equator") and g.radius <= 0:
            raise ConfigInvalid("geometry.radius", "must be positive")
        if p.profile not in (FOURIER_SYMBOL, MODEL_PROFILE):
            raise ConfigInvalid("potential.profile", f"expected {FOURIER_SYMBOL} or {MODEL_PROFILE}")
        if p.profile == MODEL_PROFILE and p.model not in ("delta", "heaviside", "power"):
            raise ConfigInvalid("potential.model", "expected delta, heaviside or power")
        if p.grid_n < 8:
            raise ConfigInvalid("potential.grid_n", "needs at least 8 cells")
        if p.grid_half_width < p.support_radius:
            raise ConfigInvalid("potential.grid_half_width", "grid must cover the support ball")
        if not 0.0 <= p.taper < 1.0:
            raise ConfigInvalid("potential.taper", "must lie in [0, 1)")
        dx = 2.0 * p.grid_half_width / p.grid_n
        if p.mollify_scale < 2.0 * dx - 1e-12:
            raise ConfigInvalid("potential.mollify_scale",
                                f"{p.mollify_scale} is below two grid cells ({2 * dx:.4g})")
        if w.epsilon <= 0:
            raise ConfigInvalid("wavefield.epsilon", "must be positive")
        if SUPPORT_WIDTHS * w.epsilon < 2.0 * dx:
            raise ConfigInvalid("wavefield.epsilon", "pulse support below two grid cells")
        if w.receiver_radius <= p.support_radius + 2 * SUPPORT_WIDTHS * w.epsilon:
            raise ConfigInvalid("wavefield.receiver_radius", "receiver too close to the support")
        if s.ds < 0:
            raise ConfigInvalid("scatter.ds", "must be non-negative")
        if self.ds > w.epsilon / 4.0 + 1e-12:
            raise ConfigInvalid("scatter.ds", f"pulse width needs at least four s-cells "
                                              f"(ds <= {w.epsilon / 4:.4g})")
        if s.route not in ("friedlander", "lax_phillips"):
            raise ConfigInvalid("scatter.route", "expected friedlander or lax_phillips")
        if not 0 <= s.level <= 4:
            raise ConfigInvalid("scatter.level", "icosphere level must lie in 0..4")
        if s.slice not in ("backscatter", "rotated_backscatter", "identity"):
            raise ConfigInvalid("scatter.slice",
                                "expected backscatter, rotated_backscatter or identity")
        if r.calibration_c <= 0:
            raise ConfigInvalid("reconstruct.calibration_c", "must be positive")
        if r.classify not in ("geometry", "decay"):
            raise ConfigInvalid("reconstruct.classify", "expected geometry or decay")
        if r.specular_tol < 0:
            raise ConfigInvalid("reconstruct.specular_tol", "must be non-negative")
        if not 0.0 <= r.rel_floor < 1.0:
            raise ConfigInvalid("reconstruct.rel_floor", "must lie in [0, 1)")
        nested = g.primitive in ("line-in-plane", "sphere+equator") and "potential" in self.sections
        if nested and p.profile == FOURIER_SYMBOL:
            if p.enforce_admissibility and not admissible_orders(p.M1, p.M2, 1, 1):
                raise ConfigInvalid("potential.M1", f"orders ({p.M1}, {p.M2}) outside the "
                                                    "admissible window")
        if nested and p.profile == MODEL_PROFILE:
            raise ConfigInvalid("potential.profile", "nested primitives need FOURIER_SYMBOL")
        for name, val in (("geometry_suite.certificates", self.geometry_suite.certificates),
                          ("geometry_suite.multiphase_grid", self.geometry_suite.multiphase_grid),
                          ("geometry_suite.prop71_samples", self.geometry_suite.prop71_samples)):
            if val < 0:
                raise ConfigInvalid(name, "must be non-negative")

    # derived objects

    @property
    def is_empty(self):
        return not (self.sections - {"scenario"})

    @property
    def ds(self):
        return self.scatter.ds or self.wavefield.epsilon / 4.0

    @property
    def grid_spacing(self):
        return 2.0 * self.potential.grid_half_width / self.potential.grid_n

    def pair(self):
        g = self.geometry
        if g.primitive == "plane":
            return NestedPair.plane(normal=g.normal, offset=g.offset)
        if g.primitive == "line-in-plane":
            return NestedPair.plane_line(height=g.height, line_offset=g.line_offset)
        if g.primitive == "sphere":
            return NestedPair.sphere(radius=g.radius, center=g.center)
        if g.primitive == "sphere+equator":
            return NestedPair.sphere_equator(radius=g.radius, center=g.center)
        return None

    def grid(self):
        return Grid.cube(self.potential.grid_half_width, self.potential.grid_n)

    def potential_spec(self):
        p = self.potential
        amp = Amplitude(radius=p.support_radius, taper=p.taper)
        return PotentialSpec(self.pair(), M1=p.M1, M2=p.M2, profile=p.profile, model=p.model,
                             amplitude=amp, mollify_scale=p.mollify_scale, scale=p.scale,
                             enforce_admissibility=p.enforce_admissibility,
                             box_half_width=p.box_half_width, low_cut=p.low_cut)

    def pulse(self):
        return SourcePulse(self.wavefield.epsilon)

    def data_slice(self):
        s = self.scatter
        if s.slice == "backscatter":
            return DataSliceSpec.backscatter()
        if s.slice == "rotated_backscatter":
            return DataSliceSpec.rotated_backscatter(s.axis, s.angle_deg)
        return DataSliceSpec.identity()

    def as_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self):
        """SHA-256 of the canonical JSON form of the parsed configuration.

        The output directory and thread count do not change results and are
        left out.
        """
        d = self.as_dict()
        d["scenario"].pop("out")
        d["scenario"].pop("threads")
        text = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(text.encode()).hexdigest()
