"""Flat ``section.key = value`` run configuration with named presets.

A config file is UTF-8 text, one assignment per line; ``#`` starts a comment.
Every key has a default (see :func:`default_lines`), unknown keys are errors,
and the resolved config can be written back out verbatim.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .mask import MsrsHyper
from .methods import SparseMethodConfig
from .optim import OptimizerConfig
from .tasks import ModelSpec, pathological_model_spec
from .train import TaskConfig

__all__ = ["ConfigError", "RunConfig", "WarmStart", "LogConfig", "PRESETS", "parse_text", "apply",
           "base_config", "known_keys", "load_config",
           "preset", "render", "default_lines"]


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class WarmStart:
    """Dense pretraining on the same task before the method runs.

    The output head is re-initialized afterwards so only the hidden layers
    carry over, mimicking a pretrained feature extractor.
    """

    enabled: bool = False
    epochs: int = 20
    lr: float = 1e-3
    seed_offset: int = 100
    reset_head: bool = True


@dataclass(frozen=True)
class LogConfig:
    interval: int = 10
    out: str = "runs/out"


@dataclass
class RunConfig:
    model: ModelSpec
    task: TaskConfig
    method: SparseMethodConfig
    optim: OptimizerConfig
    warm: WarmStart
    log: LogConfig
    seed: int = 0


# key prefix -> (attribute on RunConfig, dataclass); the msrs section lives on method.msrs
_SECTIONS = {
    "model": ModelSpec,
    "task": TaskConfig,
    "method": SparseMethodConfig,
    "msrs": MsrsHyper,
    "optim": OptimizerConfig,
    "warm": WarmStart,
    "log": LogConfig,
}
# file key -> dataclass field
_ALIASES = {("msrs", "lambda"): "lam", ("method", "name"): "method"}


def _field_key(section: str, key: str) -> str:
    return _ALIASES.get((section, key), key)


def _file_key(section: str, fname: str) -> str:
    for (s, k), f in _ALIASES.items():
        if s == section and f == fname:
            return k
    return fname


def _section_fields(section: str) -> dict:
    cls = _SECTIONS[section]
    out = {}
    for f in fields(cls):
        if section == "method" and f.name == "msrs":
            continue
        out[_file_key(section, f.name)] = f
    return out


def known_keys() -> list[str]:
    keys = ["run.seed"]
    for s in _SECTIONS:
        keys += [f"{s}.{k}" for k in _section_fields(s)]
    return keys


def _coerce(key: str, ftype, raw: str):
    t = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    try:
        if t == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError
        if t == "int":
            return int(raw)
        if t == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {t}") from None
    return raw


def parse_text(text: str, origin: str = "<config>") -> dict[str, str]:
    """Parse assignments into ``{dotted key: raw string}``; last one wins."""
    out = {}
    known = set(known_keys())
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {body!r}")
        key, value = (p.strip() for p in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"{origin}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def apply(cfg: RunConfig, assignments: dict[str, str]) -> RunConfig:
    """Return a copy of ``cfg`` with the raw assignments applied and validated."""
    grouped: dict[str, dict] = {}
    seed = cfg.seed
    for key, raw in assignments.items():
        section, _, name = key.partition(".")
        if key == "run.seed":
            seed = _coerce(key, "int", raw)
            continue
        fdefs = _section_fields(section) if section in _SECTIONS else {}
        if name not in fdefs:
            raise ConfigError(f"unknown key {key!r}")
        grouped.setdefault(section, {})[_field_key(section, name)] = _coerce(key, fdefs[name].type, raw)

    def build(section: str, current):
        kw = grouped.get(section, {})
        if not kw:
            return current
        try:
            return replace(current, **kw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{section}.*: {exc}") from None

    msrs = build("msrs", cfg.method.msrs)
    method = build("method", cfg.method)
    try:
        method = replace(method, msrs=msrs)
    except ValueError as exc:
        raise ConfigError(f"method.*: {exc}") from None
    return RunConfig(model=build("model", cfg.model), task=build("task", cfg.task), method=method,
                     optim=build("optim", cfg.optim), warm=build("warm", cfg.warm),
                     log=build("log", cfg.log), seed=seed)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render(cfg: RunConfig) -> str:
    """Full resolved config; feeding it back through :func:`parse_text` is lossless."""
    lines = [f"run.seed = {cfg.seed}"]
    objs = {"model": cfg.model, "task": cfg.task, "method": cfg.method, "msrs": cfg.method.msrs,
            "optim": cfg.optim, "warm": cfg.warm, "log": cfg.log}
    for section, obj in objs.items():
        for key, f in _section_fields(section).items():
            lines.append(f"{section}.{key} = {_fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def base_config() -> RunConfig:
    """Library defaults; the msrs section carries the published hyperparameters."""
    return RunConfig(model=ModelSpec(), task=TaskConfig(), method=SparseMethodConfig(),
                     optim=OptimizerConfig(), warm=WarmStart(), log=LogConfig(), seed=0)


def _pathological() -> dict:
    spec = pathological_model_spec()
    return {"model.depth": str(spec.depth), "model.width": str(spec.width),
            "model.activation": spec.activation, "model.residual": "false",
            "model.gain": repr(spec.gain)}


PRESETS: dict[str, dict[str, str]] = {
    # published values, untouched
    "published": {},
    # benign residual net on the teacher task; used for the lambda sweep
    "desk": {
        "method.name": "msrs", "method.dense_after": "false",
        "msrs.lambda": "1e-3", "optim.peak_lr_theta": "1e-3", "optim.peak_lr_phi": "0.1",
        "optim.total_epochs": "10",
    },
    # deep plain tanh net trained from random init
    "from-scratch": {
        **_pathological(),
        "method.name": "msrs", "method.dense_after": "false",
        "msrs.lambda": "1e-5", "optim.peak_lr_theta": "2e-4", "optim.peak_lr_phi": "2e-4",
        "optim.total_epochs": "20",
    },
    # same net, hidden layers pretrained densely first
    "warm-start": {
        **_pathological(),
        "method.name": "msrs", "method.dense_after": "false",
        "msrs.lambda": "1e-5", "optim.peak_lr_theta": "1e-3", "optim.peak_lr_phi": "2e-4",
        "optim.total_epochs": "20", "warm.enabled": "true",
    },
    "two-spirals": {
        "task.name": "spirals", "task.noise": "0.05", "model.d_in": "2", "model.d_out": "2",
        "model.depth": "3", "model.width": "32", "method.name": "dense",
        "optim.peak_lr_theta": "1e-2", "optim.total_epochs": "30",
    },
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply(base_config(), PRESETS[name])


def load_config(path: str | None = None, preset_name: str | None = None,
                overrides: list[str] | None = None) -> RunConfig:
    """Preset (default ``published``), then the file, then ``key=value`` overrides."""
    cfg = preset(preset_name or "published")
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        cfg = apply(cfg, parse_text(text, str(p)))
    if overrides:
        cfg = apply(cfg, parse_text("\n".join(overrides), "--set"))
    if cfg.task.name == "teacher" and cfg.task.d_in != cfg.model.d_in:
        raise ConfigError(f"task.d_in ({cfg.task.d_in}) must equal model.d_in ({cfg.model.d_in})")
    return cfg


def default_lines() -> str:
    return render(base_config())
