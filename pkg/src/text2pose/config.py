"""Run configuration (flat dotted keys) and run manifests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import tempfile
import time
from pathlib import Path

from .clop import ClopConfig
from .curation import CurationConfig
from .diffusion import DiffusionConfig
from .dit import DitConfig
from .vae import VaeConfig


class ConfigError(ValueError):
    pass


_SECTIONS = {
    "vae": VaeConfig,
    "clop": ClopConfig,
    "dit": DitConfig,
    "diffusion": DiffusionConfig,
    "curation": CurationConfig,
}
_SKIP = {("diffusion", "dit"), ("clop", "vocab_size")}

TOP_LEVEL = {
    "seed": 0,            # propagated to every module seed not set explicitly
    "out_dir": "runs",    # root for run directories; MVP_OUT_ROOT overrides the default
    "frames": 64,
    "frame_width": 512,
    "frame_height": 512,
    "eval.pool_size": 32,
    "eval.s_dis": 300,
    "eval.mm_samples": 32,
}


def default_values() -> dict:
    values = dict(TOP_LEVEL)
    values["out_dir"] = os.environ.get("MVP_OUT_ROOT", values["out_dir"])
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in _SKIP:
                continue
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            values[f"{section}.{f.name}"] = list(default) if isinstance(default, tuple) else default
    return values


def parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        lowered = text.lower()
        if lowered in ("true", "false"):
            return lowered == "true"
        if lowered in ("none", "null"):
            return None
        return text


def _format(value) -> str:
    return value if isinstance(value, str) else json.dumps(value)


class RunConfig:
    """All settings of one run. Keys not in :func:`default_values` are rejected."""

    def __init__(self, overrides: dict | None = None):
        self.values = default_values()
        self.explicit: set[str] = set()
        for key, value in (overrides or {}).items():
            self.set(key, value)

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise ConfigError(f"unknown config key {key!r}")
        default = self.values[key]
        if isinstance(value, str):
            value = value.strip()
        if isinstance(value, str) and not isinstance(default, str):
            value = parse_value(value)
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool) and value is not None:
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{key} expects a number, got {value!r}")
        self.values[key] = value
        self.explicit.add(key)

    @classmethod
    def from_file(cls, path=None, sets=()) -> "RunConfig":
        cfg = cls()
        if path is not None:
            try:
                lines = Path(path).read_text().splitlines()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            for n, line in enumerate(lines, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{n}: expected key = value")
                key, value = line.split("=", 1)
                cfg.set(key.strip(), value)
        for item in sets:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            cfg.set(key.strip(), value)
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def build(self, name: str):
        """Instantiate the dataclass of section ``name``; top-level seed fills an unset module seed."""
        kwargs = self.section(name)
        if "seed" in kwargs and f"{name}.seed" not in self.explicit:
            kwargs["seed"] = self.values["seed"]
        if name == "vae":
            kwargs["widths"] = tuple(kwargs["widths"])
        if name == "diffusion":
            kwargs["dit"] = self.build("dit")
        try:
            return _SECTIONS[name](**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} settings: {exc}") from exc

    def dump(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.values.items()))

    def digest(self) -> str:
        return hashlib.sha256(self.dump().encode()).hexdigest()


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_json(path, payload: dict) -> None:
    write_atomic(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


@dataclasses.dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    checkpoints: dict = dataclasses.field(default_factory=dict)
    metrics: dict = dataclasses.field(default_factory=dict)
    wall_clock: float = 0.0
    started: float = dataclasses.field(default_factory=time.time)

    def finish(self, run_dir) -> Path:
        self.wall_clock = round(time.time() - self.started, 3)
        payload = dataclasses.asdict(self)
        payload.pop("started")
        path = Path(run_dir) / "manifest.json"
        write_json(path, payload)
        return path
