"""Run configuration: TOML text to a validated :class:`RunConfig`.

The schema is documented in ``docs/config_schema.md``.  Every key is
checked against a fixed vocabulary, so a typo is an error rather than a
silently ignored setting.  Operators and states are validated (Hermiticity,
trace, positivity) here, at parse time, so that a bad input is reported as
a configuration error and never reaches the numerics.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, WeakTrajError
from .lindblad import LindbladModel
from .operators import Effect, HilbertSpace, Operator, State
from .stonybrook import METHODS, StonyBrookParams, build_stonybrook

COMMANDS = ("steady", "evolve", "weakvalue-aav", "weakvalue-general", "weakvalue-mc",
            "stonybrook-h", "fit")

_SECTIONS = {
    "model": {"builder", "dims", "H", "collapse", "homodyne_channel", "counting_channel",
              "epsilon", "kappa", "gamma_perp", "g", "n_max", "eta_h", "eta_c",
              "coupling_convention"},
    "states": {"rho0", "psi0", "initial", "effect", "phi", "observable", "c"},
    "numerics": {"dt", "t", "T", "times", "n_traj", "seed", "window", "smooth",
                 "tau_min", "tau_max", "n_tau", "methods"},
    "output": {"path", "format", "trajectory"},
    "input": {"curve", "column"},
}
_SB_KEYS = {"epsilon", "kappa", "gamma_perp", "g", "n_max", "eta_h", "eta_c", "coupling_convention"}
_EXPLICIT_KEYS = {"dims", "H", "collapse", "homodyne_channel", "counting_channel"}

_NEEDS = {
    "steady": ("model",),
    "evolve": ("model", "states", "numerics"),
    "weakvalue-aav": ("states",),
    "weakvalue-general": ("model", "states", "numerics"),
    "weakvalue-mc": ("model", "states", "numerics"),
    "stonybrook-h": ("model",),
    "fit": (),
}


@dataclass(frozen=True)
class Numerics:
    dt: Optional[float] = None
    t: Optional[float] = None
    T: Optional[float] = None
    times: Optional[tuple] = None
    n_traj: int = 10000
    seed: Optional[int] = None
    window: Optional[float] = None
    smooth: Optional[float] = None
    tau_min: float = -5.0
    tau_max: float = 5.0
    n_tau: int = 201
    methods: tuple = ("full-ME", "effective-H", "analytic")


@dataclass(frozen=True)
class OutputSpec:
    path: Optional[str] = None
    format: str = "csv"
    trajectory: bool = False


@dataclass(frozen=True)
class RunConfig:
    """Validated configuration for a single command.

    ``source`` keeps the parsed TOML document for echoing into the manifest.
    """

    command: str
    model: Optional[LindbladModel] = None
    sb_params: Optional[StonyBrookParams] = None
    states: dict = field(default_factory=dict)
    numerics: Numerics = Numerics()
    output: OutputSpec = OutputSpec()
    curve_path: Optional[str] = None
    curve_column: str = "h_full"
    source: dict = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return self.output.path or self.command


# -- scalar and array coercion -------------------------------------------------

def _number(value, name, positive=False, nonneg=False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{name} must be a number, got {value!r}")
    value = float(value)
    if not np.isfinite(value):
        raise ConfigError(f"{name} must be finite")
    if positive and value <= 0:
        raise ConfigError(f"{name} must be > 0, got {value}")
    if nonneg and value < 0:
        raise ConfigError(f"{name} must be >= 0, got {value}")
    return value


def _integer(value, name, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {value}")
    return value


def _complex(entry, name) -> complex:
    if isinstance(entry, list):
        if len(entry) != 2:
            raise ConfigError(f"{name}: complex entries are [re, im] pairs, got {entry!r}")
        return complex(_number(entry[0], name), _number(entry[1], name))
    return complex(_number(entry, name))


def parse_ket(value, name) -> np.ndarray:
    if not isinstance(value, list) or not value:
        raise ConfigError(f"{name} must be a non-empty list of entries")
    vec = np.array([_complex(e, name) for e in value])
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ConfigError(f"{name} is the zero vector")
    return vec / norm


def parse_matrix(value, name) -> np.ndarray:
    """Row-major list of rows; each entry a real number or an ``[re, im]`` pair."""
    if not isinstance(value, list) or not value or not all(isinstance(r, list) for r in value):
        raise ConfigError(f"{name} must be a list of rows")
    n = len(value)
    if any(len(r) != n for r in value):
        raise ConfigError(f"{name} must be square ({n} rows)")
    return np.array([[_complex(e, name) for e in row] for row in value])


# -- sections -----------------------------------------------------------------

def _check_keys(doc, section):
    allowed = _SECTIONS[section]
    data = doc.get(section, {})
    if not isinstance(data, dict):
        raise ConfigError(f"[{section}] must be a table")
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown key {section}.{key}")
    return data


def _stonybrook_params(m) -> StonyBrookParams:
    kw = {}
    for key in ("epsilon", "kappa", "gamma_perp", "eta_h", "eta_c"):
        if key in m:
            kw[key] = _number(m[key], f"model.{key}")
    if "n_max" in m:
        kw["n_max"] = _integer(m["n_max"], "model.n_max", 1)
    if "g" in m:
        g = m["g"] if isinstance(m["g"], list) else [m["g"]]
        kw["g"] = tuple(_number(x, "model.g") for x in g)
    if "coupling_convention" in m:
        kw["coupling_convention"] = m["coupling_convention"]
    try:
        return StonyBrookParams(**kw)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from exc


def _explicit_model(m) -> LindbladModel:
    if "H" not in m:
        raise ConfigError("model.H is required for builder = 'explicit'")
    H = parse_matrix(m["H"], "model.H")
    dims = m.get("dims", [H.shape[0]])
    if not isinstance(dims, list):
        raise ConfigError("model.dims must be a list of subsystem dimensions")
    dims = tuple(_integer(d, "model.dims", 1) for d in dims)
    if int(np.prod(dims)) != H.shape[0]:
        raise ConfigError(f"model.dims {dims} do not multiply to the size of H ({H.shape[0]})")
    herm = float(np.max(np.abs(H - H.conj().T)))
    if herm > 1e-10:
        raise ConfigError(f"model.H violates the Hermiticity invariant (max |H - H^dag| = {herm:.3g})")
    space = HilbertSpace(dims)
    cols = m.get("collapse", [])
    if not isinstance(cols, list):
        raise ConfigError("model.collapse must be a list of matrices")
    cops = []
    for i, c in enumerate(cols):
        mat = parse_matrix(c, f"model.collapse[{i}]")
        if mat.shape != H.shape:
            raise ConfigError(f"model.collapse[{i}] has shape {mat.shape}, H has {H.shape}")
        cops.append(Operator(mat, space))
    chans = {}
    for key in ("homodyne_channel", "counting_channel"):
        if key in m:
            chans[key] = _integer(m[key], f"model.{key}", 0)
    try:
        return LindbladModel(Operator(H, space), cops, **chans)
    except (ValueError, WeakTrajError) as exc:
        raise ConfigError(f"model: {exc}") from exc


def _model(m):
    builder = m.get("builder", "explicit")
    if builder == "stonybrook":
        stray = set(m) & _EXPLICIT_KEYS
        if stray:
            raise ConfigError(f"keys {sorted(stray)} do not apply to builder = 'stonybrook'")
        p = _stonybrook_params(m)
        return build_stonybrook(p), p
    if builder == "explicit":
        stray = set(m) & _SB_KEYS
        if stray:
            raise ConfigError(f"keys {sorted(stray)} only apply to builder = 'stonybrook'")
        return _explicit_model(m), None
    raise ConfigError(f"model.builder must be 'explicit' or 'stonybrook', got {builder!r}")


def _states(s, space):
    out = {}
    dim = None if space is None else space.total_dim

    def fit(arr, name):
        if dim is not None and arr.shape[0] != dim:
            raise ConfigError(f"states.{name} has dimension {arr.shape[0]}, model has {dim}")
        return arr

    try:
        if "rho0" in s and "psi0" in s:
            raise ConfigError("give either states.rho0 or states.psi0, not both")
        if "rho0" in s:
            out["rho0"] = State(fit(parse_matrix(s["rho0"], "states.rho0"), "rho0"), space)
        if "psi0" in s:
            out["psi0"] = fit(parse_ket(s["psi0"], "states.psi0"), "psi0")
        if "initial" in s:
            if s["initial"] != "steady":
                raise ConfigError("states.initial only accepts 'steady'")
            if "rho0" in s or "psi0" in s:
                raise ConfigError("states.initial = 'steady' conflicts with an explicit initial state")
            out["initial"] = "steady"
        if "effect" in s and "phi" in s:
            raise ConfigError("give either states.effect or states.phi, not both")
        if "effect" in s:
            out["effect"] = Effect(fit(parse_matrix(s["effect"], "states.effect"), "effect"), space)
        if "phi" in s:
            out["phi"] = fit(parse_ket(s["phi"], "states.phi"), "phi")
        for key in ("observable", "c"):
            if key in s:
                out[key] = fit(parse_matrix(s[key], f"states.{key}"), key)
    except WeakTrajError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"states: {exc}") from exc
    if "observable" in out:
        X = out["observable"]
        if np.max(np.abs(X - X.conj().T)) > 1e-10:
            raise ConfigError("states.observable violates the Hermiticity invariant")
    return out


def _numerics(n, command):
    kw = {}
    for key in ("dt", "window", "smooth"):
        if key in n:
            kw[key] = _number(n[key], f"numerics.{key}", positive=True)
    for key in ("t", "T"):
        if key in n:
            kw[key] = _number(n[key], f"numerics.{key}", nonneg=True)
    for key in ("tau_min", "tau_max"):
        if key in n:
            kw[key] = _number(n[key], f"numerics.{key}")
    if "times" in n:
        if not isinstance(n["times"], list) or not n["times"]:
            raise ConfigError("numerics.times must be a non-empty list")
        times = tuple(_number(x, "numerics.times", nonneg=True) for x in n["times"])
        if any(b < a for a, b in zip(times, times[1:])):
            raise ConfigError("numerics.times must be non-decreasing")
        kw["times"] = times
    if "n_traj" in n:
        kw["n_traj"] = _integer(n["n_traj"], "numerics.n_traj", 2)
    if "n_tau" in n:
        kw["n_tau"] = _integer(n["n_tau"], "numerics.n_tau", 2)
    if "seed" in n:
        kw["seed"] = _integer(n["seed"], "numerics.seed", 0)
    if "methods" in n:
        methods = n["methods"]
        if not isinstance(methods, list) or not methods:
            raise ConfigError("numerics.methods must be a non-empty list")
        bad = [m for m in methods if m not in METHODS]
        if bad:
            raise ConfigError(f"numerics.methods: unknown {bad}; choose from {list(METHODS)}")
        kw["methods"] = tuple(methods)
    num = Numerics(**kw)
    if num.tau_max <= num.tau_min:
        raise ConfigError("numerics.tau_max must exceed numerics.tau_min")
    return num


def _output(o):
    fmt = o.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError("output.format must be 'csv' or 'json'")
    path = o.get("path")
    if path is not None and (not isinstance(path, str) or not path or "/" in path):
        raise ConfigError("output.path must be a plain file stem (no directories)")
    traj = o.get("trajectory", False)
    if not isinstance(traj, bool):
        raise ConfigError("output.trajectory must be true or false")
    return OutputSpec(path, fmt, traj)


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _validate_command(cfg: RunConfig, present):
    cmd, st, num = cfg.command, cfg.states, cfg.numerics
    for section in _NEEDS[cmd]:
        _require(section in present, f"command {cmd!r} needs a [{section}] section")
    if cmd == "evolve":
        _require("rho0" in st or "psi0" in st or "initial" in st, "evolve needs an initial state")
        _require(num.times is not None, "evolve needs numerics.times")
    elif cmd == "weakvalue-aav":
        _require("psi0" in st and "phi" in st, "weakvalue-aav needs states.psi0 and states.phi")
        _require("observable" in st, "weakvalue-aav needs states.observable")
        _require(len(st["psi0"]) == len(st["phi"]) == st["observable"].shape[0],
                 "weakvalue-aav: psi0, phi and observable dimensions differ")
    elif cmd in ("weakvalue-general", "weakvalue-mc"):
        _require("rho0" in st or "psi0" in st or "initial" in st,
                 f"{cmd} needs an initial state (rho0, psi0 or initial = 'steady')")
        if cmd == "weakvalue-general":
            _require("effect" in st or "phi" in st, f"{cmd} needs states.effect or states.phi")
        else:
            _require("effect" not in st and "phi" not in st,
                     "weakvalue-mc postselects on counting-channel detections; "
                     "states.effect and states.phi are not used")
        _require(num.t is not None and num.T is not None, f"{cmd} needs numerics.t and numerics.T")
        _require(num.t <= num.T, "numerics.t must not exceed numerics.T")
        if cmd == "weakvalue-general":
            _require("c" in st or cfg.model.homodyne_channel is not None,
                     "weakvalue-general needs model.homodyne_channel or states.c")
        else:
            _require(num.seed is not None, "weakvalue-mc needs numerics.seed (stochastic command)")
            _require(cfg.model.homodyne_channel is not None and cfg.model.counting_channel is not None,
                     "weakvalue-mc needs model.homodyne_channel and model.counting_channel")
            _require("c" not in st, "weakvalue-mc measures the homodyne channel; states.c is not used")
            _require(num.t < num.T, "weakvalue-mc needs t < T")
    elif cmd == "stonybrook-h":
        _require(cfg.sb_params is not None, "stonybrook-h needs model.builder = 'stonybrook'")
        if "monte-carlo" in num.methods:
            _require(num.seed is not None, "the monte-carlo method needs numerics.seed")
    elif cmd == "fit":
        _require(cfg.curve_path is not None or cfg.sb_params is not None,
                 "fit needs [input] curve or a stonybrook [model]")


def parse_config(text: str, command: Optional[str] = None) -> RunConfig:
    """Parse and validate configuration text.

    ``command`` (from the command line) takes the place of a top-level
    ``command`` key; if both are present they must agree.
    """
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        line = getattr(exc, "lineno", None)
        col = getattr(exc, "colno", None)
        where = f" (line {line}, column {col})" if line is not None else ""
        raise ConfigError(f"config parse error{where}: {exc}") from exc
    for key in doc:
        if key != "command" and key not in _SECTIONS:
            raise ConfigError(f"unknown top-level key or section {key!r}")
    file_cmd = doc.get("command")
    if command is not None and file_cmd is not None and command != file_cmd:
        raise ConfigError(f"config says command = {file_cmd!r} but {command!r} was requested")
    cmd = command or file_cmd
    if cmd is None:
        raise ConfigError("no command given")
    if cmd not in COMMANDS:
        raise ConfigError(f"unknown command {cmd!r}; choose from {list(COMMANDS)}")
    sections = {name: _check_keys(doc, name) for name in _SECTIONS}
    present = {name for name in _SECTIONS if name in doc}

    model = params = None
    if "model" in present:
        model, params = _model(sections["model"])
    space = model.space if model is not None else None
    states = _states(sections["states"], space)
    numerics = _numerics(sections["numerics"], cmd)
    output = _output(sections["output"])
    inp = sections["input"]
    curve = inp.get("curve")
    if curve is not None and not isinstance(curve, str):
        raise ConfigError("input.curve must be a path string")
    column = inp.get("column", "h_full")
    if column not in ("h_full", "h_eff", "h_mc"):
        raise ConfigError("input.column must be one of h_full, h_eff, h_mc")

    cfg = RunConfig(cmd, model, params, states, numerics, output, curve, column, doc)
    _validate_command(cfg, present)
    return cfg


def load_config(path, command: Optional[str] = None) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError(f"config is not valid UTF-8: {exc}") from exc
    return parse_config(text, command)


def to_jsonable(obj: Any):
    """Config echo helper: TOML values to JSON-compatible types."""
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return str(obj)
