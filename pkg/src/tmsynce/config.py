"""Experiment configuration: TOML schema, validation and hashing.

A config file has these tables (all keys optional unless noted)::

    schema_version = 1              # required
    name = "LT direct"              # row label in reports

    [problem]
    kind = "banana-quartic"         # or "synthetic-bifidelity"
    cost_ratio = 0.001              # coarse cost relative to fine
    noise_variance = 0.001          # synthetic only
    target_rho = 0.9                # synthetic only
    data_seed = 2024                # synthetic only

    [method]
    kind = "tm-synce"               # or "no-map-synce"
    configuration = "direct"        # or "deep"
    omega = 0.5

    [maps.fine]                     # and [maps.coarse]
    kind = "triangular"             # analytical | triangular | identity
    order = 4                       # triangular only
    init = "identity"               # or "laplace": initial standardization

    [run]
    iterations = 100000
    burn_in = 30000
    retrain_period = 5000
    repetitions = 5
    seed = 0
    workers = 1
    output = "runs/lt_direct"

    [proposal]
    covariance_scale = 2.8322       # reference covariance is scale * I
    adapt = false
    adapt_epoch = 500
    adapt_warmup = 1000
    adapt_eps = 1e-6

    [allocation]
    eps2 = 1e-4
    coarse_iterations = 0           # independent coarse-only chain for the estimate
    reference_iterations = 0        # long fine-only chain used as a reference
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError

SCHEMA_VERSION = 1

PROBLEMS = ("banana-quartic", "synthetic-bifidelity")
METHODS = ("tm-synce", "no-map-synce")
CONFIGURATIONS = ("direct", "deep")
MAP_KINDS = ("analytical", "triangular", "identity")
MAP_INITS = ("identity", "laplace")

_SCHEMA: dict[str, dict[str, type | tuple[type, ...]]] = {
    "": {"schema_version": int, "name": str},
    "problem": {"kind": str, "cost_ratio": (int, float), "noise_variance": (int, float),
                "target_rho": (int, float), "data_seed": int},
    "method": {"kind": str, "configuration": str, "omega": (int, float)},
    "maps.fine": {"kind": str, "order": int, "init": str},
    "maps.coarse": {"kind": str, "order": int, "init": str},
    "run": {"iterations": int, "burn_in": int, "retrain_period": int, "repetitions": int,
            "seed": int, "workers": int, "output": str},
    "proposal": {"covariance_scale": (int, float), "adapt": bool, "adapt_epoch": int,
                 "adapt_warmup": int, "adapt_eps": (int, float)},
    "allocation": {"eps2": (int, float), "coarse_iterations": int, "reference_iterations": int},
}
_TABLES = {"problem", "method", "maps", "run", "proposal", "allocation"}


@dataclass(frozen=True)
class MapSpec:
    """Map selector for one level."""

    kind: str = "triangular"
    order: int = 2
    init: str = "identity"


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment settings.

    ``covariance_scale=None`` means the default ``2.38^2 / d``.
    """

    name: str = "experiment"
    problem: str = "banana-quartic"
    method: str = "tm-synce"
    configuration: str = "direct"
    omega: float = 0.0
    fine_map: MapSpec = field(default_factory=lambda: MapSpec("triangular", 4))
    coarse_map: MapSpec = field(default_factory=lambda: MapSpec("triangular", 2))
    iterations: int = 100000
    burn_in: int = 30000
    retrain_period: int = 5000
    repetitions: int = 5
    seed: int = 0
    workers: int = 1
    output: str = "runs/experiment"
    covariance_scale: float | None = None
    adapt: bool = False
    adapt_epoch: int = 500
    adapt_warmup: int = 1000
    adapt_eps: float = 1e-6
    cost_ratio: float = 0.001
    noise_variance: float = 0.001
    target_rho: float = 0.9
    data_seed: int = 2024
    eps2: float = 1e-4
    coarse_iterations: int = 0
    reference_iterations: int = 0
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        _validate(self)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """Digest of every setting that affects samples; seed and I/O fields excluded."""
        data = self.to_dict()
        for key in ("seed", "workers", "output"):
            data.pop(key)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, **changes) -> "ExperimentConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        return replace(self, **changes)


def _validate(cfg: ExperimentConfig) -> None:
    def check(cond, msg):
        if not cond:
            raise ConfigurationError(msg)

    check(cfg.schema_version == SCHEMA_VERSION,
          f"unsupported schema_version {cfg.schema_version}; expected {SCHEMA_VERSION}")
    check(cfg.problem in PROBLEMS, f"problem.kind must be one of {PROBLEMS}")
    check(cfg.method in METHODS, f"method.kind must be one of {METHODS}")
    check(cfg.configuration in CONFIGURATIONS, f"method.configuration must be one of {CONFIGURATIONS}")
    check(0.0 <= cfg.omega <= 1.0, "method.omega must lie in [0, 1]")
    for level, spec in (("fine", cfg.fine_map), ("coarse", cfg.coarse_map)):
        check(spec.kind in MAP_KINDS, f"maps.{level}.kind must be one of {MAP_KINDS}")
        check(spec.init in MAP_INITS, f"maps.{level}.init must be one of {MAP_INITS}")
        check(1 <= spec.order <= 8, f"maps.{level}.order must lie in [1, 8]")
        if spec.kind == "analytical":
            check(cfg.problem == "banana-quartic",
                  "analytical maps exist only for the banana-quartic problem")
    if cfg.configuration == "deep":
        check(cfg.method == "tm-synce", "the deep configuration needs method.kind = 'tm-synce'")
    check(cfg.iterations >= 1, "run.iterations must be positive")
    check(0 <= cfg.burn_in < cfg.iterations, "run.burn_in must be nonnegative and smaller than run.iterations")
    check(cfg.retrain_period >= 1, "run.retrain_period must be positive")
    check(cfg.repetitions >= 1, "run.repetitions must be positive")
    check(cfg.seed >= 0, "run.seed must be nonnegative")
    check(cfg.workers >= 1, "run.workers must be positive")
    check(cfg.covariance_scale is None or cfg.covariance_scale > 0, "proposal.covariance_scale must be positive")
    check(cfg.adapt_epoch >= 1 and cfg.adapt_warmup >= 2, "adaptation epoch and warmup must be positive")
    check(cfg.adapt_eps >= 0, "proposal.adapt_eps must be nonnegative")
    check(cfg.cost_ratio > 0, "problem.cost_ratio must be positive")
    check(cfg.noise_variance > 0, "problem.noise_variance must be positive")
    check(0.0 < cfg.target_rho < 1.0, "problem.target_rho must lie in (0, 1)")
    check(cfg.eps2 > 0, "allocation.eps2 must be positive")
    check(cfg.coarse_iterations >= 0 and cfg.reference_iterations >= 0,
          "allocation chain lengths must be nonnegative")
    for name, n in (("coarse_iterations", cfg.coarse_iterations), ("reference_iterations", cfg.reference_iterations)):
        check(n == 0 or n > cfg.burn_in, f"allocation.{name} must exceed run.burn_in when positive")


def _line_of(text: str, table: str, key: str | None = None) -> int | None:
    """1-based line of ``key`` inside ``[table]`` (or of the table header)."""
    current = ""
    header = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-\s]+?)\s*\]\s*(#.*)?$")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = re.sub(r"\s+", "", m.group(1))
            if key is None and current == table:
                return i
            continue
        if key is not None and current == table and re.match(rf"^\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _fail(source: str, text: str, table: str, key: str | None, message: str):
    line = _line_of(text, table, key)
    where = f"{source}:{line}" if line else source
    raise ConfigurationError(f"{where}: {message}")


def _flatten(doc: dict, text: str, source: str) -> dict[str, dict]:
    """Split the parsed document into schema tables, rejecting unknown keys."""
    out: dict[str, dict] = {"": {}}
    for key, value in doc.items():
        if isinstance(value, dict):
            if key not in _TABLES:
                _fail(source, text, key, None, f"unknown table [{key}]")
            if key == "maps":
                for level, sub in value.items():
                    name = f"maps.{level}"
                    if name not in _SCHEMA or not isinstance(sub, dict):
                        _fail(source, text, name, None, f"unknown table [{name}]")
                    out[name] = sub
            else:
                out[key] = value
        else:
            out[""][key] = value
    for table, values in out.items():
        allowed = _SCHEMA[table]
        for key, value in values.items():
            label = f"{table}.{key}" if table else key
            if key not in allowed:
                _fail(source, text, table, key, f"unknown key '{label}'")
            types = allowed[key]
            if isinstance(value, bool) and bool not in (types if isinstance(types, tuple) else (types,)):
                _fail(source, text, table, key, f"'{label}' has the wrong type")
            if not isinstance(value, types):
                _fail(source, text, table, key, f"'{label}' has the wrong type")
    return out


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse and validate TOML text.

    Raises:
        ConfigurationError: Syntax errors, unknown keys, wrong types or
            invalid values; the message starts with ``source:line``.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    tables = _flatten(doc, text, source)
    top = tables[""]
    if "schema_version" not in top:
        raise ConfigurationError(f"{source}: missing required key 'schema_version'")

    def get(table, key, default):
        return tables.get(table, {}).get(key, default)

    def spec(level, default_order):
        return MapSpec(get(f"maps.{level}", "kind", "triangular"), get(f"maps.{level}", "order", default_order),
                       get(f"maps.{level}", "init", "identity"))

    d = ExperimentConfig.__dataclass_fields__
    kwargs = {
        "schema_version": top["schema_version"],
        "name": top.get("name", d["name"].default),
        "problem": get("problem", "kind", d["problem"].default),
        "cost_ratio": float(get("problem", "cost_ratio", d["cost_ratio"].default)),
        "noise_variance": float(get("problem", "noise_variance", d["noise_variance"].default)),
        "target_rho": float(get("problem", "target_rho", d["target_rho"].default)),
        "data_seed": get("problem", "data_seed", d["data_seed"].default),
        "method": get("method", "kind", d["method"].default),
        "configuration": get("method", "configuration", d["configuration"].default),
        "omega": float(get("method", "omega", d["omega"].default)),
        "fine_map": spec("fine", 4),
        "coarse_map": spec("coarse", 2),
        "covariance_scale": (float(get("proposal", "covariance_scale", 0.0))
                             if "covariance_scale" in tables.get("proposal", {}) else None),
        "adapt": get("proposal", "adapt", d["adapt"].default),
        "adapt_epoch": get("proposal", "adapt_epoch", d["adapt_epoch"].default),
        "adapt_warmup": get("proposal", "adapt_warmup", d["adapt_warmup"].default),
        "adapt_eps": float(get("proposal", "adapt_eps", d["adapt_eps"].default)),
        "eps2": float(get("allocation", "eps2", d["eps2"].default)),
        "coarse_iterations": get("allocation", "coarse_iterations", d["coarse_iterations"].default),
        "reference_iterations": get("allocation", "reference_iterations", d["reference_iterations"].default),
    }
    for key in ("iterations", "burn_in", "retrain_period", "repetitions", "seed", "workers", "output"):
        kwargs[key] = get("run", key, d[key].default)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigurationError as exc:
        msg = str(exc)
        table, _, key = msg.split(" ", 1)[0].rpartition(".")
        line = _line_of(text, table, key) if key else None
        raise ConfigurationError(f"{source}:{line}: {msg}" if line else f"{source}: {msg}") from None


def load_config(path) -> ExperimentConfig:
    """Read and validate a config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def bundled_configs() -> dict[str, Path]:
    """Bundled experiment fixtures keyed by file stem."""
    root = Path(__file__).parent / "configs"
    return {p.stem: p for p in sorted(root.glob("*.toml"))}
