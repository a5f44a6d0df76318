# Scenario settings of the laboratory pipeline.
# Last modified on Oct 18, 2026
import json
from copy import deepcopy
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..components.flow import SYSTEM_TAGS, IntegratorConfig
from ..components.geometry import Grid1D, WarpedGeometry
from ..utility.errors import ConfigurationError

SCHEMA_VERSION = 1

STAGES = ("flow", "conjugate", "harnack", "reduced", "functionals")

# name: (parameter defaults, callable of (x, **parameters))
EXPRESSION_CATALOG = {
    "constant": ({"value": 1.0}, lambda x, value: np.full_like(x, value)),
    "sine": (
        {"a": 1.0, "k": 1, "b": 0.0},
        lambda x, a, k, b: a * np.sin(k * x) + b,
    ),
    "cosine_bump": (
        {"eps": 0.1, "m": 1},
        lambda x, eps, m: 1.0 + eps * np.cos(m * x),
    ),
}

DEFAULT_TAU_SCHEDULE = {
    "tau_min_fraction": 0.1,
    "reduced_tau_max": None,
    "n_slices": 64,
    "nu_taus": [0.2, 0.1, 0.05, 0.025],
    "mu_tau_end": 0.1,
    "mu_samples": 4,
    "lambda_samples": 16,
    "n_curves": 3,
}

DEFAULT_OUTPUT = {"snapshot_stride": 100, "kernel_stride": 100}


def _check_expression(expr, label):
    if not isinstance(expr, dict) or "name" not in expr:
        raise ConfigurationError(
            f"{label} must be a dict with a 'name' from {sorted(EXPRESSION_CATALOG)}."
        )
    name = expr["name"]
    if name not in EXPRESSION_CATALOG:
        raise ConfigurationError(
            f"Unknown expression '{name}' in {label}; choose from "
            f"{sorted(EXPRESSION_CATALOG)}."
        )
    defaults, _ = EXPRESSION_CATALOG[name]
    unknown = set(expr) - set(defaults) - {"name"}
    if unknown:
        raise ConfigurationError(
            f"Unknown parameters {sorted(unknown)} for expression '{name}'."
        )
    for key, value in expr.items():
        if key != "name" and not isinstance(value, int | float):
            raise ConfigurationError(f"Parameter {key} of {label} must be a number.")


def evaluate_expression(expr, x):
    """Evaluate a catalog expression on the coordinate array x.

    Parameters
    ----------
    expr : dict
        {"name": catalog name, **parameters}; missing parameters take the
        catalog defaults.

        >>> expr = {"name": "sine", "a": 0.3, "k": 1, "b": 0.0}

    x : numpy.ndarray
        Coordinates.

    Returns
    -------
    numpy.ndarray
    """
    _check_expression(expr, "expression")
    defaults, func = EXPRESSION_CATALOG[expr["name"]]
    pars = {**defaults, **{k: v for k, v in expr.items() if k != "name"}}
    return func(np.asarray(x, dtype=float), **pars)


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything a pipeline run depends on.

    Parameters
    ----------
    name : str
        Scenario name, also the default run directory name.
    n_points : int
        Grid points of the base circle.
    coordinate_length : float
        Period of the coordinate x.
    p : int
        Fiber dimension.
    V_F : float
        Volume of the fiber.
    phi_expr, u_expr : dict
        Catalog expressions of the initial phi and of the physical u.
    integrator : IntegratorConfig
        Flow settings; ``integrator.t_end`` is the end of the flow.
    system_tag : str
        System the kernels and Harnack checks run on.
    T : float
        Kernel center time, at most the end of the flow.
    centers : tuple of int
        Grid indices y of the kernel and reduced distance centers.
    tau_schedule : dict
        tau windows and sample counts of the checks (see
        DEFAULT_TAU_SCHEDULE).
    checks : tuple of str
        Stages to run, a subset of STAGES in pipeline order.
    seed : int
        Seed of every randomized field (test vector fields, curves).
    output : dict
        Row strides of the large CSV files.

    Notes
    -----
    A sample settings dictionary, as read from JSON:

    >>> settings = {
    >>>     "schema_version": 1,
    >>>     "name": "coupled-p1",
    >>>     "grid": {"n_points": 256, "coordinate_length": 6.283185307179586},
    >>>     "p": 1,
    >>>     "V_F": 1.0,
    >>>     "phi_expr": {"name": "constant", "value": 1.0},
    >>>     "u_expr": {"name": "sine", "a": 0.3, "k": 1, "b": 0.0},
    >>>     "integrator": {"t_end": 0.5, "scheme": "explicit-rk4"},
    >>>     "system_tag": "gauged",
    >>>     "T": 0.5,
    >>>     "centers": [0],
    >>>     "tau_schedule": {"n_slices": 64},
    >>>     "checks": ["flow", "conjugate", "harnack", "reduced", "functionals"],
    >>>     "seed": 0
    >>>     }

    A "preset" key starts from a named preset and overrides the given keys.
    """

    name: str
    n_points: int = 256
    coordinate_length: float = 2.0 * np.pi
    p: int = 1
    V_F: float = 1.0
    phi_expr: dict = field(default_factory=lambda: {"name": "constant", "value": 1.0})
    u_expr: dict = field(default_factory=lambda: {"name": "constant", "value": 0.0})
    integrator: IntegratorConfig = field(
        default_factory=lambda: IntegratorConfig(t_end=0.5)
    )
    system_tag: str = "gauged"
    T: float | None = None
    centers: tuple = (0,)
    tau_schedule: dict = field(default_factory=dict)
    checks: tuple = STAGES
    seed: int = 0
    output: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"Unsupported schema_version {self.schema_version}."
            )
        _check_expression(self.phi_expr, "phi_expr")
        _check_expression(self.u_expr, "u_expr")
        if self.system_tag not in SYSTEM_TAGS:
            raise ConfigurationError(
                f"Unknown system_tag '{self.system_tag}'; choose from {SYSTEM_TAGS}."
            )
        if int(self.p) != self.p or self.p < 1:
            raise ConfigurationError(f"p must be a positive integer, got {self.p}.")
        if not self.V_F > 0:
            raise ConfigurationError(f"V_F must be positive, got {self.V_F}.")
        T = self.integrator.t_end if self.T is None else float(self.T)
        if not 0 < T <= self.integrator.t_end:
            raise ConfigurationError(
                f"T = {T} must lie in (0, t_end = {self.integrator.t_end}]."
            )
        checks = tuple(self.checks)
        unknown = set(checks) - set(STAGES)
        if unknown:
            raise ConfigurationError(
                f"Unknown checks {sorted(unknown)}; choose from {STAGES}."
            )
        centers = tuple(int(y) for y in self.centers)
        if not centers or any(not 0 <= y < self.n_points for y in centers):
            raise ConfigurationError(
                f"centers {centers} must be nonempty grid indices below "
                f"{self.n_points}."
            )
        unknown = set(self.tau_schedule) - set(DEFAULT_TAU_SCHEDULE)
        if unknown:
            raise ConfigurationError(f"Unknown tau_schedule keys {sorted(unknown)}.")
        unknown = set(self.output) - set(DEFAULT_OUTPUT)
        if unknown:
            raise ConfigurationError(f"Unknown output keys {sorted(unknown)}.")
        # Grid1D validates n_points and coordinate_length.
        Grid1D(self.n_points, self.coordinate_length)
        object.__setattr__(self, "T", T)
        object.__setattr__(self, "p", int(self.p))
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "checks", tuple(s for s in STAGES if s in checks))
        schedule = {**DEFAULT_TAU_SCHEDULE, **deepcopy(self.tau_schedule)}
        object.__setattr__(self, "tau_schedule", schedule)
        object.__setattr__(self, "output", {**DEFAULT_OUTPUT, **deepcopy(self.output)})

    @classmethod
    def from_dict(cls, settings: dict):
        """Build a config from a settings dictionary (see the class notes)."""
        settings = deepcopy(settings)
        preset = settings.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigurationError(
                    f"Unknown preset '{preset}'; choose from {sorted(PRESETS)}."
                )
            base = deepcopy(PRESETS[preset])
            for key in ("grid", "integrator", "tau_schedule", "output"):
                if key in settings and key in base:
                    base[key] = {**base[key], **settings.pop(key)}
            settings = {**base, **settings}
        grid = settings.pop("grid", {})
        unknown = set(grid) - {"n_points", "coordinate_length"}
        if unknown:
            raise ConfigurationError(f"Unknown grid keys {sorted(unknown)}.")
        settings.update(grid)
        if "integrator" in settings:
            settings["integrator"] = IntegratorConfig.from_dict(settings["integrator"])
        for key in ("centers", "checks"):
            if key in settings:
                settings[key] = tuple(settings[key])
        unknown = set(settings) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"Unknown scenario keys {sorted(unknown)}.")
        if "name" not in settings:
            raise ConfigurationError("A scenario needs a name.")
        return cls(**settings)

    @classmethod
    def from_json(cls, path):
        with open(Path(path)) as f:
            try:
                settings = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigurationError(f"{path} is not valid JSON: {e}") from e
        return cls.from_dict(settings)

    @classmethod
    def from_preset(cls, name, **overrides):
        return cls.from_dict({"preset": name, **overrides})

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = {
            "n_points": out.pop("n_points"),
            "coordinate_length": out.pop("coordinate_length"),
        }
        out["integrator"] = self.integrator.to_dict()
        out["centers"] = list(self.centers)
        out["checks"] = list(self.checks)
        return out

    @property
    def grid(self) -> Grid1D:
        return Grid1D(self.n_points, self.coordinate_length)

    @property
    def spacing(self) -> float:
        return self.grid.spacing

    def initial_geometry(self) -> WarpedGeometry:
        """Initial slice with the physical u."""
        x = self.grid.x
        return WarpedGeometry(
            self.grid,
            evaluate_expression(self.phi_expr, x),
            evaluate_expression(self.u_expr, x),
            p=self.p,
            time=0.0,
            gauged=False,
        )

    def is_static_flat(self) -> bool:
        """True when phi and u start constant, so the flow does not move."""
        x = self.grid.x
        return bool(
            np.ptp(evaluate_expression(self.phi_expr, x)) == 0
            and np.ptp(evaluate_expression(self.u_expr, x)) == 0
        )

    def with_level(self, k):
        """Refinement level k: 2^k times the grid points and DP slices.

        Centers keep their coordinate, the CFL step shrinks with the spacing,
        and the CSV strides grow so that the written times stay comparable.
        """
        if k < 0:
            raise ConfigurationError(f"Level must be nonnegative, got {k}.")
        factor = 2**k
        schedule = dict(self.tau_schedule)
        schedule["n_slices"] = self.tau_schedule["n_slices"] * factor
        output = {key: value * factor**2 for key, value in self.output.items()}
        return replace(
            self,
            n_points=self.n_points * factor,
            centers=tuple(y * factor for y in self.centers),
            tau_schedule=schedule,
            output=output,
        )

    def with_seed(self, seed):
        return replace(self, seed=int(seed))


PRESETS = {
    "flat-static": {
        "name": "flat-static",
        "grid": {"n_points": 256, "coordinate_length": 2.0 * np.pi},
        "p": 1,
        "phi_expr": {"name": "constant", "value": 1.0},
        "u_expr": {"name": "constant", "value": 0.0},
        "integrator": {"t_end": 0.5},
        "T": 0.5,
        "centers": [0],
    },
    "coupled-p1": {
        "name": "coupled-p1",
        "grid": {"n_points": 256, "coordinate_length": 2.0 * np.pi},
        "p": 1,
        "phi_expr": {"name": "constant", "value": 1.0},
        "u_expr": {"name": "sine", "a": 0.3, "k": 1, "b": 0.0},
        "integrator": {"t_end": 0.5},
        "T": 0.5,
        "centers": [0],
    },
    "coupled-p2": {
        "name": "coupled-p2",
        "grid": {"n_points": 256, "coordinate_length": 2.0 * np.pi},
        "p": 2,
        "phi_expr": {"name": "constant", "value": 1.0},
        "u_expr": {"name": "sine", "a": 0.3, "k": 1, "b": 0.0},
        "integrator": {"t_end": 0.5},
        "T": 0.5,
        "centers": [0],
    },
}
