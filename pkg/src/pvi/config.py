"""Experiment configuration files: INI sections of ``key = value`` pairs.

Unknown sections or keys are rejected with the offending line number, and
every run writes back the fully resolved configuration so it can be
re-run verbatim.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .flow import PviConfig


class ConfigError(ValueError):
    pass


_TARGET_KEYS: dict[str, Any] = {
    "kind": "multimodal",  # multimodal | banana | xshape | gaussian | bimodal | logistic | bnn
    "mu": 4.0,
    "dim": 2,
    "shift": 0.0,
    "data": "",  # CSV path, or "waveform" for the generated benchmark
    "n_data": 400,
    "data_seed": 0,
    "response_col": -1,
    "header": False,
    "standardize": True,
    "standardize_responses": True,
    "train_fraction": 0.9,
    "n_train": 0,  # explicit split counts override train_fraction when set
    "n_test": 0,
    "split_seed": 0,
    "d_h": 10,
    "noise_std": 0.01,
    "prior_var": 25.0,
    "prior_precision": 0.01,
}

_KERNEL_KEYS: dict[str, Any] = {
    "kind": "skip",  # constant | push | skip | lskip | lskip_fullcov | lskip_hetero
    "d_z": 0,  # 0 means d_x
    "hidden": 128,
    "slope": 0.01,
    "c": 1.0,
    "log_sigma0": 0.0,
    "w_init": "zero",
    "eps0": 1e-8,
}

_EVAL_KEYS: dict[str, Any] = {
    "n_samples": 10000,
    "n_proj": 100,
    "mmd_n": 500,
    "n_perm": 200,
    "alpha": 0.05,
    "oracle_h": 0.01,
    "oracle_burn": 2000,
    "oracle_keep": 50000,
    "oracle_thin": 1,
    "oracle_chains": 4,
    "predictive_samples": 100,
    "seed": 0,
}

_EXPERIMENT_KEYS: dict[str, Any] = {
    "name": "experiment",
    "out": "",
    "deterministic": False,
}

_PVI_KEYS: dict[str, Any] = {f.name: f.default for f in fields(PviConfig)}

SCHEMA = {
    "experiment": _EXPERIMENT_KEYS,
    "target": _TARGET_KEYS,
    "kernel": _KERNEL_KEYS,
    "pvi": _PVI_KEYS,
    "eval": _EVAL_KEYS,
}

# fields whose default is None but which take floats
_OPTIONAL_FLOATS = {"h_theta_final", "h_theta_factor"}


@dataclass
class RunConfig:
    experiment: dict = field(default_factory=lambda: dict(_EXPERIMENT_KEYS))
    target: dict = field(default_factory=lambda: dict(_TARGET_KEYS))
    kernel: dict = field(default_factory=lambda: dict(_KERNEL_KEYS))
    pvi: dict = field(default_factory=lambda: dict(_PVI_KEYS))
    eval: dict = field(default_factory=lambda: dict(_EVAL_KEYS))
    source: str = ""

    def pvi_config(self) -> PviConfig:
        try:
            return PviConfig(**self.pvi)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"[pvi]: {err}") from None

    def section(self, name: str) -> dict:
        return getattr(self, name)


def _line_of(path: Path | None, section: str, key: str | None) -> str:
    if path is None:
        return ""
    current = None
    for no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return f"line {no}: "
        elif current == section and key is not None and "=" in line:
            if line.split("=", 1)[0].strip() == key:
                return f"line {no}: "
    return ""


def _parse_value(default, raw: str, optional_float: bool = False):
    raw = raw.strip()
    if optional_float:
        return None if raw.lower() in ("", "none") else float(raw)
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, path: Path | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case-sensitive (K, M, L)
    try:
        cp.read_string(text, source=str(path or "<config>"))
    except configparser.Error as err:
        raise ConfigError(f"malformed config: {err}") from None
    cfg = RunConfig(source=str(path or ""))
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{_line_of(path, sec, None)}unknown section [{sec}]")
        schema = SCHEMA[sec]
        values = cfg.section(sec)
        for key, raw in cp.items(sec):
            if key not in schema:
                raise ConfigError(f"{_line_of(path, sec, key)}unknown key {key!r} in [{sec}]")
            try:
                values[key] = _parse_value(schema[key], raw, key in _OPTIONAL_FLOATS)
            except ValueError as err:
                raise ConfigError(f"{_line_of(path, sec, key)}[{sec}] {key}: {err}") from None
    cfg.pvi_config()  # validate invariants up front
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), path)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for sec in SCHEMA:
        lines.append(f"[{sec}]")
        for key, value in cfg.section(sec).items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def write_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
