"""Scenario files: loading, validation, defaults, and model construction.

A scenario is a YAML mapping. Validation collects every problem (with its
field path) before failing, so a broken file is reported in one pass.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import yaml

from . import levy
from .bsde import RegressionBasis
from .coefficients import MODULI, ModelCoefficients, SamplePlan, modulus_from_spec
from .errors import ConfigurationError
from .registry import REGISTRY, SLOTS, Dims, make
from .sde import TimeGrid

DEFAULTS = {
    "name": "unnamed",
    "description": "",
    "measure": {"kind": "power-law", "alpha": 0.5, "scale": 1.0, "radius": 1.0},
    "dims": {"state": 1, "brownian": 1, "equations": 1, "marks": 1},
    "coefficients": {
        "b": {"name": "zero"},
        "sigma": {"name": "zero"},
        "beta": {"name": "zero"},
        "gamma": None,  # one {"name": "zero"} per equation
        "g": None,
        "h": None,
        "lipschitz_const": 1.0,
        "moduli": {},
    },
    "time": {"t0": 0.0, "T": 1.0},
    "x0": None,  # zeros
    "numerics": {
        "n_steps": 50,
        "n_paths": 100000,
        "k": 8,
        "ladder": [2, 4, 8, 16],
        "seed": 12345,
        "basis": {"kind": "polynomial", "degree": 3},
        "z_method": "regression",
        "control_variates": True,
        "interpolation": "nearest",
        "workers": 1,
        "tolerances": {"quad_rtol": 1e-8, "residual_rms": 0.05, "viscosity": 0.05, "terminal": 1e-6},
        "validation": {"n_pairs": 10000, "box": [-5.0, 5.0], "p_values": [2.0]},
    },
    "outputs": {"directory": "out", "formats": ["csv"]},
}

# replaced wholesale rather than merged key by key
_OPAQUE = {"measure", "coefficients.b", "coefficients.sigma", "coefficients.beta", "coefficients.moduli", "numerics.basis"}

_PER_EQUATION = {"gamma": {"name": "zero"}, "g": {"name": "constant", "value": 0.0}, "h": {"name": "zero"}}


class ScenarioError(ConfigurationError):
    """Validation failure carrying every (field path, message) pair."""

    def __init__(self, errors):
        self.errors = list(errors)
        lines = "\n".join(f"  {path}: {msg}" for path, msg in self.errors)
        super().__init__(f"{len(self.errors)} scenario error(s):\n{lines}")


def _merge(default, given, path, errors):
    if given is None:
        return copy.deepcopy(default)
    if isinstance(default, dict) and default and path not in _OPAQUE:
        if not isinstance(given, dict):
            errors.append((path, "expected a mapping"))
            return copy.deepcopy(default)
        out = copy.deepcopy(default)
        for key, val in given.items():
            sub = f"{path}.{key}" if path else key
            if key not in default:
                errors.append((sub, "unknown field"))
                continue
            out[key] = _merge(default[key], val, sub, errors)
        return out
    return copy.deepcopy(given)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _validate(data, errors):
    dims = data["dims"]
    bad_dims = [key for key in ("state", "brownian", "equations", "marks")
                if not _is_int(dims.get(key)) or dims[key] < 1]
    errors.extend((f"dims.{key}", "must be a positive integer") for key in bad_dims)
    if bad_dims:
        return
    kx, m = dims["state"], dims["equations"]

    meas = data["measure"]
    try:
        lam = levy.measure_from_spec(meas)
        if lam.dim_e != dims["marks"]:
            errors.append(("measure", f"mark dimension {lam.dim_e} differs from dims.marks={dims['marks']}"))
    except (ConfigurationError, KeyError, TypeError, ValueError) as exc:
        errors.append(("measure", str(exc)))

    co = data["coefficients"]
    rdims = Dims(kx, dims["brownian"], m, dims["marks"])
    for slot in ("b", "sigma", "beta"):
        _check_coef(co[slot], slot, f"coefficients.{slot}", rdims, 0, errors)
    for slot in ("gamma", "g", "h"):
        block = co[slot]
        if block is None:
            co[slot] = [dict(_PER_EQUATION[slot]) for _ in range(m)]
            continue
        if not isinstance(block, list):
            errors.append((f"coefficients.{slot}", "expected a list with one entry per equation"))
            continue
        if len(block) != m:
            errors.append((f"coefficients.{slot}", f"dimension mismatch: {len(block)} entries for m={m} equations"))
            continue
        for i, spec in enumerate(block):
            _check_coef(spec, slot, f"coefficients.{slot}[{i}]", rdims, i, errors)
    if not isinstance(co["lipschitz_const"], (int, float)) or co["lipschitz_const"] <= 0:
        errors.append(("coefficients.lipschitz_const", "must be a positive number"))
    if not isinstance(co["moduli"], dict):
        errors.append(("coefficients.moduli", "expected a mapping slot -> modulus"))
    else:
        for slot, spec in co["moduli"].items():
            if slot not in SLOTS:
                errors.append((f"coefficients.moduli.{slot}", f"unknown slot; known: {list(SLOTS)}"))
                continue
            if not isinstance(spec, dict) or spec.get("name") not in MODULI:
                errors.append((f"coefficients.moduli.{slot}", f"unknown modulus; known: {sorted(MODULI)}"))
                continue
            try:
                modulus_from_spec(spec)
            except (ConfigurationError, TypeError) as exc:
                errors.append((f"coefficients.moduli.{slot}", str(exc)))

    tm = data["time"]
    if not all(isinstance(tm.get(k), (int, float)) for k in ("t0", "T")):
        errors.append(("time", "t0 and T must be numbers"))
    elif not tm["T"] > tm["t0"]:
        errors.append(("time.T", "must exceed time.t0"))

    if data["x0"] is None:
        data["x0"] = [0.0] * kx
    x0 = data["x0"] if isinstance(data["x0"], list) else [data["x0"]]
    data["x0"] = x0
    if len(x0) != kx or not all(isinstance(v, (int, float)) for v in x0):
        errors.append(("x0", f"expected {kx} numbers"))

    nu = data["numerics"]
    for key in ("n_steps", "n_paths", "k", "workers"):
        if not _is_int(nu.get(key)) or nu[key] < 1:
            errors.append((f"numerics.{key}", "must be a positive integer"))
    if not _is_int(nu.get("seed")) or nu["seed"] < 0:
        errors.append(("numerics.seed", "must be a non-negative integer"))
    lad = nu.get("ladder")
    if not isinstance(lad, list) or not all(_is_int(v) and v >= 1 for v in lad):
        errors.append(("numerics.ladder", "must be a list of positive integers"))
    elif any(b <= a for a, b in zip(lad, lad[1:])):
        errors.append(("numerics.ladder", "ladder not strictly increasing"))
    elif len(lad) < 3:
        errors.append(("numerics.ladder", "needs at least three levels"))
    try:
        RegressionBasis.from_spec(nu["basis"])
    except (ConfigurationError, TypeError) as exc:
        errors.append(("numerics.basis", str(exc)))
    if nu["z_method"] not in ("regression", "fd"):
        errors.append(("numerics.z_method", "must be 'regression' or 'fd'"))
    if nu["interpolation"] not in ("nearest", "linear"):
        errors.append(("numerics.interpolation", "must be 'nearest' or 'linear'"))
    if not isinstance(nu["control_variates"], bool):
        errors.append(("numerics.control_variates", "must be true or false"))
    box = nu["validation"].get("box")
    if not (isinstance(box, list) and len(box) == 2 and box[0] < box[1]):
        errors.append(("numerics.validation.box", "expected [low, high] with low < high"))


def _check_coef(spec, slot, path, dims, index, errors):
    if not isinstance(spec, dict) or "name" not in spec:
        errors.append((path, "expected a mapping with a registry 'name'"))
        return
    if spec["name"] not in REGISTRY[slot]:
        errors.append((path, f"unknown registry name {spec['name']!r}; known: {sorted(REGISTRY[slot])}"))
        return
    try:
        make(slot, spec, dims, index)
    except (ConfigurationError, TypeError, ValueError) as exc:
        errors.append((path, str(exc)))


@dataclass(frozen=True)
class ScenarioConfig:
    """A validated scenario with all defaults filled in."""

    data: dict
    source: str | None = None

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and self.data == other.data

    @property
    def name(self):
        return self.data["name"]

    @property
    def numerics(self):
        return self.data["numerics"]

    @property
    def x0(self):
        return [float(v) for v in self.data["x0"]]

    def dims(self) -> Dims:
        d = self.data["dims"]
        return Dims(d["state"], d["brownian"], d["equations"], d["marks"])

    def measure(self) -> levy.LevyMeasure:
        return levy.measure_from_spec(self.data["measure"])

    def model(self) -> ModelCoefficients:
        dims = self.dims()
        co = self.data["coefficients"]
        return ModelCoefficients(
            dims=dims,
            b=make("b", co["b"], dims), sigma=make("sigma", co["sigma"], dims), beta=make("beta", co["beta"], dims),
            gamma=[make("gamma", s, dims, i) for i, s in enumerate(co["gamma"])],
            g=[make("g", s, dims, i) for i, s in enumerate(co["g"])],
            h=[make("h", s, dims, i) for i, s in enumerate(co["h"])],
            lipschitz_const=float(co["lipschitz_const"]),
            horizon=float(self.data["time"]["T"]),
            moduli=dict(co["moduli"]),
        )

    def grid(self, n_steps=None) -> TimeGrid:
        tm = self.data["time"]
        return TimeGrid(float(tm["t0"]), float(tm["T"]), int(n_steps or self.numerics["n_steps"]))

    def basis(self) -> RegressionBasis:
        return RegressionBasis.from_spec(self.numerics["basis"])

    def sample_plan(self) -> SamplePlan:
        v = self.numerics["validation"]
        lam = self.measure()
        radius = lam.support_radius if lam.support_radius != float("inf") else 10.0
        return SamplePlan(n_pairs=int(v.get("n_pairs", 10000)), box=tuple(v["box"]), mark_radius=radius,
                          p_values=tuple(float(p) for p in v.get("p_values", [2.0])),
                          t0=float(self.data["time"]["t0"]), seed=int(self.numerics["seed"]))

    def with_overrides(self, *, seed=None, k=None, ladder=None, paths=None, steps=None, workers=None) -> "ScenarioConfig":
        data = copy.deepcopy(self.data)
        nu = data["numerics"]
        for key, val in (("seed", seed), ("k", k), ("ladder", ladder), ("n_paths", paths), ("n_steps", steps),
                         ("workers", workers)):
            if val is not None:
                nu[key] = val
        return scenario_from_dict(data, self.source)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def scenario_from_dict(raw: dict, source: str | None = None) -> ScenarioConfig:
    if not isinstance(raw, dict):
        raise ScenarioError([("", "scenario must be a mapping")])
    errors = []
    data = _merge(DEFAULTS, raw, "", errors)
    _validate(data, errors)
    if errors:
        raise ScenarioError(errors)
    return ScenarioConfig(data, source)


def load_scenario(path) -> ScenarioConfig:
    """Read and validate a scenario file; raises ScenarioError listing every problem."""
    path = Path(path)
    if not path.exists():
        shipped = shipped_scenario_path(str(path))
        if shipped is None:
            raise ConfigurationError(f"scenario file {path} does not exist")
        path = shipped
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError([("", f"not valid YAML: {exc}")]) from None
    return scenario_from_dict(raw or {}, str(path))


def dump_scenario(config: ScenarioConfig, path=None) -> str:
    text = yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)
    if path is not None:
        Path(path).write_text(text)
    return text


def shipped_scenarios() -> dict:
    """name -> path of the scenarios bundled with the package."""
    root = resources.files("levyipde") / "scenarios"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def shipped_scenario_path(name: str):
    return shipped_scenarios().get(Path(name).stem if name.endswith(".yaml") else name)
