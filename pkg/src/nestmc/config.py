"""Run configuration: a versioned TOML (or JSON) document plus command-line overrides.

Layout::

    schema_version = 1

    [problem]
    name = "cva"            # catalog name, or "custom"
    linear = false          # true replaces the driver by f = 0
    [problem.params]        # keyword arguments of the problem factory
    d = 6

    [estimator]
    kind = "value"          # value | grad1 | grad2

    [density]
    lam = 0.1
    shape_u = 1.0

    [plan]
    base = [36000, 140, 1]  # N_i at ipart = 0; counts double with each ipart
    switches = [1, 2, 3]    # depths p to run (first p base counts are used)
    ipart_min = 0
    ipart_max = 8

    [run]
    replications = 1
    seed = 0
    workers = 0             # 0 means one per CPU
    time_budget = 600.0     # seconds, optional
    x0 = [0.0, ...]         # optional start point

    [output]
    path = "results/cva"
    format = "jsonl"        # jsonl | csv

    [budget]
    lambdas = [0.2, 0.4, 0.8]
    target = 1.088e-3       # optional; adds an allocation to budget reports
    p_max = 5
    i_max = 4
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from nestmc.errors import ConfigError

SCHEMA_VERSION = 1
ESTIMATOR_KINDS = ("value", "grad1", "grad2")
OUTPUT_FORMATS = ("jsonl", "csv")


@dataclass(frozen=True)
class RunConfig:
    problem: str
    problem_params: dict = field(default_factory=dict)
    linear: bool = False
    estimator: str = "value"
    lam: float = 1.0
    shape_u: float = 1.0
    base: tuple[int, ...] = (1000,)
    switches: tuple[int, ...] = (1,)
    ipart_min: int = 0
    ipart_max: int = 0
    replications: int = 1
    seed: int = 0
    workers: int = 0
    time_budget: float | None = None
    x0: tuple[float, ...] | None = None
    output_path: str | None = None
    output_format: str = "jsonl"
    budget_lambdas: tuple[float, ...] | None = None
    target_accuracy: float | None = None
    p_max: int = 5
    i_max: int = 4

    def __post_init__(self):
        if self.estimator not in ESTIMATOR_KINDS:
            raise ConfigError(f"estimator must be one of {ESTIMATOR_KINDS}, got {self.estimator!r}")
        if self.output_format not in OUTPUT_FORMATS:
            raise ConfigError(f"output format must be one of {OUTPUT_FORMATS}, got {self.output_format!r}")
        if not self.lam > 0:
            raise ConfigError("density.lam must be positive")
        if not self.shape_u > 0:
            raise ConfigError("density.shape_u must be positive")
        if not self.base or any(int(n) < 1 for n in self.base):
            raise ConfigError("plan.base must be a non-empty list of positive counts")
        if not self.switches or any(p < 1 or p > len(self.base) for p in self.switches):
            raise ConfigError(f"plan.switches must lie in 1..{len(self.base)} (the number of base counts)")
        if self.ipart_min < 0 or self.ipart_max < self.ipart_min:
            raise ConfigError("need 0 <= ipart_min <= ipart_max")
        if self.replications < 1:
            raise ConfigError("run.replications must be >= 1")
        if self.workers < 0:
            raise ConfigError("run.workers must be >= 0")
        if self.time_budget is not None and not self.time_budget > 0:
            raise ConfigError("run.time_budget must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("run.seed must be an unsigned 64-bit integer")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_mapping(cls, doc: dict) -> RunConfig:
        version = doc.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
        known = {"schema_version", "problem", "estimator", "density", "plan", "run", "output", "budget"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        prob = doc.get("problem")
        if not isinstance(prob, dict) or "name" not in prob:
            raise ConfigError("config needs a [problem] section with a name")
        est = doc.get("estimator", {})
        dens = doc.get("density", {})
        plan = doc.get("plan", {})
        run = doc.get("run", {})
        out = doc.get("output", {})
        bud = doc.get("budget", {})
        switches = plan.get("switches", len(plan.get("base", (1,))))
        if isinstance(switches, int):
            switches = [switches]
        try:
            return cls(
                problem=str(prob["name"]),
                problem_params=dict(prob.get("params", {})),
                linear=bool(prob.get("linear", False)),
                estimator=str(est.get("kind", "value")),
                lam=float(dens.get("lam", 1.0)),
                shape_u=float(dens.get("shape_u", 1.0)),
                base=tuple(int(n) for n in plan.get("base", (1000,))),
                switches=tuple(int(p) for p in switches),
                ipart_min=int(plan.get("ipart_min", 0)),
                ipart_max=int(plan.get("ipart_max", plan.get("ipart_min", 0))),
                replications=int(run.get("replications", 1)),
                seed=int(run.get("seed", 0)),
                workers=int(run.get("workers", 0)),
                time_budget=None if run.get("time_budget") is None else float(run["time_budget"]),
                x0=None if run.get("x0") is None else tuple(float(v) for v in run["x0"]),
                output_path=out.get("path"),
                output_format=str(out.get("format", "jsonl")),
                budget_lambdas=None if bud.get("lambdas") is None else tuple(float(v) for v in bud["lambdas"]),
                target_accuracy=None if bud.get("target") is None else float(bud["target"]),
                p_max=int(bud.get("p_max", 5)),
                i_max=int(bud.get("i_max", 4)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"malformed config: {exc}") from None

    def to_mapping(self) -> dict:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "problem": {"name": self.problem, "params": dict(self.problem_params), "linear": self.linear},
            "estimator": {"kind": self.estimator},
            "density": {"lam": self.lam, "shape_u": self.shape_u},
            "plan": {
                "base": list(self.base),
                "switches": list(self.switches),
                "ipart_min": self.ipart_min,
                "ipart_max": self.ipart_max,
            },
            "run": {"replications": self.replications, "seed": self.seed, "workers": self.workers},
            "output": {"format": self.output_format},
            "budget": {"p_max": self.p_max, "i_max": self.i_max},
        }
        if self.time_budget is not None:
            doc["run"]["time_budget"] = self.time_budget
        if self.x0 is not None:
            doc["run"]["x0"] = list(self.x0)
        if self.output_path is not None:
            doc["output"]["path"] = self.output_path
        if self.budget_lambdas is not None:
            doc["budget"]["lambdas"] = list(self.budget_lambdas)
        if self.target_accuracy is not None:
            doc["budget"]["target"] = self.target_accuracy
        return doc

    def dumps(self) -> str:
        """Canonical JSON echo; :func:`loads` of it gives back an equal config."""
        return json.dumps(self.to_mapping(), sort_keys=True, indent=2)

    def digest(self) -> str:
        """Hash of the settings that determine the estimates (not workers, output or time budget)."""
        doc = self.to_mapping()
        doc["run"].pop("workers", None)
        doc["run"].pop("time_budget", None)
        doc.pop("output", None)
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **overrides) -> RunConfig:
        """Copy with the non-``None`` keyword arguments applied (re-validated)."""
        names = {f.name for f in fields(self)}
        bad = set(overrides) - names
        if bad:
            raise ConfigError(f"unknown config fields: {sorted(bad)}")
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def as_flat_dict(self) -> dict:
        return asdict(self)


def loads(text: str) -> RunConfig:
    """Parse TOML, or JSON when the text starts with ``{``."""
    try:
        doc = json.loads(text) if text.lstrip().startswith("{") else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return RunConfig.from_mapping(doc)


def load(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return loads(text)


def parse_range(text: str) -> tuple[int, int]:
    """``"A..B"`` (or a single ``"A"``) to ``(A, B)``."""
    parts = text.split("..")
    try:
        if len(parts) == 1:
            a = b = int(parts[0])
        elif len(parts) == 2:
            a, b = int(parts[0]), int(parts[1])
        else:
            raise ValueError
    except ValueError:
        raise ConfigError(f"expected a range like 0..8, got {text!r}") from None
    if a < 0 or b < a:
        raise ConfigError(f"invalid range {text!r}")
    return a, b
