"""Run configuration: one flat namespace of dotted keys (``train.p_mask = 0.5``).

Files are TOML restricted to dotted ``key = value`` lines; every key can be
overridden from the command line with ``--set key=value``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data_io import SHAPE_KINDS, SyntheticSpec
from .denoiser import DenoiserConfig
from .masking import BlockLayout
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, build_schedule
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "data": {
        "frame_size": 16, "num_shapes": 1, "shape_kinds": list(SHAPE_KINDS), "shape_size": 5,
        "speed_range": [0.5, 1.5], "bounce_randomness": 0.2, "length": 20, "channels": 1, "seed": 0,
    },
    "layout": {"p": 2, "k": 4, "f": 0},
    "model": {
        "conditioning_mode": "concat", "base_width": 32, "channel_multipliers": [1, 2, 2],
        "attention_resolutions": [4], "num_res_blocks": 1, "embedding_dim": 128,
        "embedding_constant": 10000.0, "groups": 8, "num_heads": 1, "cond_width": 32,
        "zero_init_output": True, "seed": 0,
    },
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02, "kind": "linear"},
    "train": {
        "p_mask": 0.5, "masking_regime": "PastFuture", "batch_size": 8, "steps": 5000, "lr": 2e-4,
        "optimizer": "adam", "grad_clip": 1.0, "use_ema": True, "ema_decay": 0.999, "seed": 0,
        "checkpoint_interval": 0, "log_interval": 500, "stride": 1,
    },
    "sample": {"kind": "ddim", "num_steps": 100, "seed": 0, "task": "FuturePrediction", "blocks": 1, "clamp": True},
}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {v!r}")


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    # construction -------------------------------------------------------
    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = cls()
        cfg.update_text(text, source=str(path))
        return cfg

    @classmethod
    def from_dict(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        for k, v in flat.items():
            cfg.set(k, v)
        return cfg

    def update_text(self, text: str, source: str = "<string>"):
        try:
            tree = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{source}: {e}") from None
        for k, v in _flatten(tree).items():
            self.set(k, v)

    def set(self, key: str, value):
        section, _, name = key.partition(".")
        if section not in DEFAULTS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        if name not in DEFAULTS[section] and not (section == "data" and name in ("initial_positions",
                                                                                  "initial_velocities")):
            raise ConfigError(f"unknown config key {key!r}")
        default = DEFAULTS[section].get(name)
        self.values[section][name] = _coerce(key, value, default)

    def override(self, assignment: str):
        """Apply one ``key=value`` flag; the value uses TOML syntax, bare words are strings."""
        key, sep, raw = assignment.partition("=")
        if not sep:
            raise ConfigError(f"override {assignment!r} is not of the form key=value")
        key, raw = key.strip(), raw.strip()
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        self.set(key, value)

    # serialization -------------------------------------------------------
    def flat(self) -> dict:
        return _flatten(self.values)

    def dumps(self) -> str:
        return "".join(f"{k} = {_toml_value(v)}\n" for k, v in sorted(self.flat().items()) if v is not None)

    def save(self, path):
        Path(path).write_text(self.dumps())

    # typed views --------------------------------------------------------
    def _build(self, what: str, fn):
        try:
            return fn()
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid {what} settings: {e}") from None

    def synthetic(self) -> SyntheticSpec:
        d = dict(self.values["data"])
        d["shape_kinds"] = tuple(d["shape_kinds"])
        d["speed_range"] = tuple(d["speed_range"])
        for k in ("initial_positions", "initial_velocities"):
            if d.get(k) is not None:
                d[k] = tuple(tuple(p) for p in d[k])

        def make():
            spec = SyntheticSpec(**d)
            spec.validate()
            return spec
        return self._build("data", make)

    def layout(self) -> BlockLayout:
        d, lay = self.values["data"], self.values["layout"]
        return self._build("layout", lambda: BlockLayout(lay["p"], lay["k"], lay["f"], d["frame_size"],
                                                         d["frame_size"], d["channels"]))

    def denoiser(self) -> DenoiserConfig:
        m = dict(self.values["model"])
        return self._build("model", lambda: DenoiserConfig(self.layout(), **m))

    def schedule(self) -> NoiseSchedule:
        s = self.values["schedule"]
        return self._build("schedule", lambda: build_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"]))

    def train(self) -> TrainConfig:
        t = {k: v for k, v in self.values["train"].items() if k != "stride"}
        return self._build("train", lambda: TrainConfig(**t))

    def sampler(self) -> SamplerConfig:
        return self._build("sample", lambda: SamplerConfig(**self.values["sample"]))

    @property
    def stride(self) -> int:
        return int(self.values["train"]["stride"])

    def validate(self):
        self.synthetic()
        self.denoiser()
        self.schedule()
        self.train()
        self.sampler()
        return self
