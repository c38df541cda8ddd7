"""Run configuration: INI sections, flag overrides, env seed fallback.

Precedence is flags > config file > environment (EXITLAB_SEED, for the
seed only) > built-in defaults.  Unknown sections or keys fail fast
with a ConfigError naming the offender, and the fully resolved
configuration (every default filled in) is echoed into the manifest of
each run so an artifact records exactly what produced it.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field

from .errors import ConfigError

__all__ = [
    "RunConfig",
    "MODEL_PARAM_KEYS",
    "RUN_SCHEMA",
    "NUMERICS_SCHEMA",
    "load_file",
    "resolve",
]

MODEL_PARAM_KEYS = ("lambda", "gamma", "rho", "mu", "beta", "eta", "theta",
                    "chi", "alpha", "r", "R")

_REQUIRED = object()

# per-command run-block schema: key -> (type tag, default)
RUN_SCHEMA: dict = {
    "simulate": {
        "N": ("int", _REQUIRED),
        "T": ("float", 10.0),
        "reflect": ("bool", False),
        "stop": ("str", "at_horizon"),
    },
    "lln-check": {
        "N": ("int", 10_000),
        "T": ("float", 10.0),
        "replicas": ("int", 100),
        "tol": ("float", 0.05),
    },
    "basin": {
        "stride": ("int", 1),
    },
    "minpath": {
        "method": ("str", "both"),
        "M": ("int", 48),
        "refine": ("int", 0),
    },
    "profile": {
        "stride": ("int", 0),  # 0 selects one point per 1/16 of the trace
        "M": ("int", 31),
        "refine": ("int", 0),
    },
    "exit-measure": {
        "N_list": ("int_list", _REQUIRED),
        "replicas": ("int", 1000),
        "delta": ("float", 0.1),
        "horizon": ("float", 1000.0),
        "bin_width": ("float", 0.02),
        "profile_stride": ("int", 0),
        "profile_M": ("int", 31),
        "profile_refine": ("int", 0),
        "reflect": ("bool", True),
    },
    "selftest": {},
}

NUMERICS_SCHEMA = {
    "rel_tol": ("float", 1e-8),
    "abs_tol": ("float", 1e-10),
    "resolution": ("float", 1e-4),
}

_SECTIONS = ("model", "run", "numerics", "output")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one command invocation."""

    command: str
    model_name: str | None
    model_params: dict
    run: dict
    numerics: dict
    seed: int
    jobs: int
    out_dir: str

    def effective(self) -> dict:
        """Echo of the resolved configuration for the run manifest."""
        return {
            "command": self.command,
            "model": ({"name": self.model_name, **self.model_params}
                      if self.model_name else None),
            "run": dict(sorted(self.run.items())),
            "numerics": dict(sorted(self.numerics.items())),
            "seed": int(self.seed),
            "jobs": int(self.jobs),
            "output_dir": self.out_dir,
        }


def _coerce(key: str, raw, kind: str):
    """Coerce a raw config value (string or already typed) to its kind."""
    if raw is None:
        return None
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if isinstance(raw, bool):
                return raw
            val = str(raw).strip().lower()
            if val in ("1", "true", "yes", "on"):
                return True
            if val in ("0", "false", "no", "off"):
                return False
            raise ValueError(val)
        if kind == "int_list":
            if isinstance(raw, (list, tuple)):
                return [int(v) for v in raw]
            parts = [p for p in str(raw).replace(",", " ").split() if p]
            return [int(p) for p in parts]
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for key '{key}': {raw!r} "
                          f"(expected {kind})") from exc


def load_file(path) -> dict:
    """Parse an INI config file into raw string sections.

    Only the sections model/run/numerics/output are allowed; anything
    else is an unknown key and is rejected by name.
    """
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keys are case-sensitive (N vs. n)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section '{section}' "
                              f"(allowed: {', '.join(_SECTIONS)})")
        out[section] = dict(parser.items(section))
    return out


def resolve(command: str, file_cfg: dict | None, flags: dict | None,
            env: dict | None = None) -> RunConfig:
    """Merge defaults, config file, environment, and flags into a RunConfig.

    flags maps schema keys (plus "model", model parameter names, "seed",
    "jobs", "out") to already-typed values, None meaning not given.
    Unknown keys anywhere raise ConfigError naming the key.
    """
    if command not in RUN_SCHEMA:
        raise ConfigError(f"unknown command '{command}'")
    file_cfg = file_cfg or {}
    flags = flags or {}
    env = os.environ if env is None else env
    schema = RUN_SCHEMA[command]

    fm = dict(file_cfg.get("model", {}))
    model_name = flags.get("model") or fm.pop("name", None)
    model_params = {}
    for key, raw in fm.items():
        if key not in MODEL_PARAM_KEYS:
            raise ConfigError(f"unknown key '{key}' in [model] "
                              f"(allowed: name, {', '.join(MODEL_PARAM_KEYS)})")
        model_params[key] = _coerce(key, raw, "float")
    for key in MODEL_PARAM_KEYS:
        val = flags.get(key)
        if val is not None:
            model_params[key] = float(val)

    fr = dict(file_cfg.get("run", {}))
    seed_raw = fr.pop("seed", None)
    jobs_raw = fr.pop("jobs", None)
    run = {}
    for key, raw in fr.items():
        if key not in schema:
            allowed = ", ".join(sorted(schema)) or "none"
            raise ConfigError(f"unknown key '{key}' in [run] for command "
                              f"'{command}' (allowed: {allowed})")
        run[key] = _coerce(key, raw, schema[key][0])
    for key, (kind, default) in schema.items():
        val = flags.get(key)
        if val is not None:
            run[key] = _coerce(key, val, kind)
        elif key not in run:
            if default is _REQUIRED:
                raise ConfigError(f"missing required key '{key}' for "
                                  f"command '{command}'")
            run[key] = default

    fn = dict(file_cfg.get("numerics", {}))
    numerics = {}
    for key, raw in fn.items():
        if key not in NUMERICS_SCHEMA:
            raise ConfigError(f"unknown key '{key}' in [numerics] "
                              f"(allowed: {', '.join(NUMERICS_SCHEMA)})")
        numerics[key] = _coerce(key, raw, NUMERICS_SCHEMA[key][0])
    for key, (kind, default) in NUMERICS_SCHEMA.items():
        val = flags.get(key)
        if val is not None:
            numerics[key] = _coerce(key, val, kind)
        elif key not in numerics:
            numerics[key] = default

    fo = dict(file_cfg.get("output", {}))
    out_dir = flags.get("out") or fo.pop("dir", None) or "exitlab-out"
    for key in fo:
        raise ConfigError(f"unknown key '{key}' in [output] (allowed: dir)")

    if flags.get("seed") is not None:
        seed = int(flags["seed"])
    elif seed_raw is not None:
        seed = _coerce("seed", seed_raw, "int")
    elif env.get("EXITLAB_SEED"):
        seed = _coerce("EXITLAB_SEED", env["EXITLAB_SEED"], "int")
    else:
        seed = 0

    if flags.get("jobs") is not None:
        jobs = int(flags["jobs"])
    elif jobs_raw is not None:
        jobs = _coerce("jobs", jobs_raw, "int")
    else:
        jobs = os.cpu_count() or 1

    return RunConfig(
        command=command, model_name=model_name, model_params=model_params,
        run=run, numerics=numerics, seed=seed, jobs=jobs, out_dir=out_dir,
    )
