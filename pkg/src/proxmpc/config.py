"""Run configuration: one JSON document with embedded defaults.

A minimal config only needs `data.prices_csv`; everything else defaults to
the benchmark setup (C = D = 10, Q = 50, eta = 0.075, H = 24, the 13-policy
roster, 10 trials, scenario pool 640).  Unknown keys are rejected with the
offending dotted path, so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .policies import StorageSpec
from .simulate import PolicySpec

DEFAULT_POLICIES = (
    [{"kind": "mpc"}]
    + [{"kind": "mf_mpc", "scenarios": s} for s in (20, 40, 80, 160, 320, 640)]
    + [{"kind": "ip_mpc", "batch": 20, "iterations": k} for k in (1, 2, 4, 8, 16, 32)]
)

DEFAULTS = {
    "data": {
        "prices_csv": None,
        "winsorize_pct": 0.2,
        "train_hours": None,  # None: everything before the test window
        "test_hours": 1344,
    },
    "forecast": {
        "ridge_baseline": None,  # None: 1e-3 * n_samples
        "ridge_ar": None,
        "smoothing": 10.0,
        "model_json": None,  # reuse a previously fitted model
    },
    "storage": {
        "charge_max": 10.0,
        "discharge_max": 10.0,
        "capacity": 50.0,
        "spread": 0.075,
        "horizon": 24,
        "terminal_target": None,  # None: capacity / 2
    },
    "simulation": {
        "q_init": None,  # None: capacity / 2
        "scenario_pool": 640,
        "trials": 10,
        "base_seed": 0,
    },
    "policies": DEFAULT_POLICIES,
    "output": {
        "dir": "results",
        "figures": True,
    },
}

# (path, type tuple, nullable) for scalar fields
_FIELD_TYPES = {
    "data.prices_csv": (str, True),
    "data.winsorize_pct": ((int, float), False),
    "data.train_hours": (int, True),
    "data.test_hours": (int, False),
    "forecast.ridge_baseline": ((int, float), True),
    "forecast.ridge_ar": ((int, float), True),
    "forecast.smoothing": ((int, float), False),
    "forecast.model_json": (str, True),
    "storage.charge_max": ((int, float), False),
    "storage.discharge_max": ((int, float), False),
    "storage.capacity": ((int, float), False),
    "storage.spread": ((int, float), False),
    "storage.horizon": (int, False),
    "storage.terminal_target": ((int, float), True),
    "simulation.q_init": ((int, float), True),
    "simulation.scenario_pool": (int, False),
    "simulation.trials": (int, False),
    "simulation.base_seed": (int, False),
    "output.dir": (str, False),
    "output.figures": (bool, False),
}

_POLICY_KEYS = {
    "mpc": set(),
    "mf_mpc": {"scenarios"},
    "ip_mpc": {"batch", "iterations", "step_alpha", "step_beta", "order", "init"},
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        dotted = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(defaults[key], dict) and key != "policies":
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be an object")
            out[key] = _merge(defaults[key], value, f"{dotted}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check_types(doc: dict):
    for dotted, (types, nullable) in _FIELD_TYPES.items():
        section, name = dotted.split(".")
        value = doc[section][name]
        if value is None:
            if not nullable:
                raise ConfigError(f"{dotted} must not be null")
            continue
        if isinstance(value, bool) and types is not bool:
            raise ConfigError(f"{dotted} has wrong type bool")
        if not isinstance(value, types):
            raise ConfigError(f"{dotted} has wrong type {type(value).__name__}")


def _parse_policy(entry, index: int) -> PolicySpec:
    if not isinstance(entry, dict):
        raise ConfigError(f"policies[{index}] must be an object")
    kind = entry.get("kind")
    if kind not in _POLICY_KEYS:
        raise ConfigError(f"policies[{index}].kind must be one of {sorted(_POLICY_KEYS)}")
    extra = set(entry) - {"kind"} - _POLICY_KEYS[kind]
    if extra:
        raise ConfigError(f"unknown config key: policies[{index}].{sorted(extra)[0]}")
    try:
        if kind == "mpc":
            return PolicySpec("mpc")
        if kind == "mf_mpc":
            return PolicySpec("mf_mpc", scenarios=int(entry["scenarios"]))
        return PolicySpec(
            "ip_mpc",
            batch=int(entry.get("batch", 20)),
            iterations=int(entry.get("iterations", 1)),
            step_alpha=float(entry.get("step_alpha", 7.0)),
            step_beta=float(entry.get("step_beta", 0.0)),
            order=str(entry.get("order", "cyclic")),
            init=str(entry.get("init", "mpc_plan")),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"policies[{index}]: {exc}") from None


@dataclass(frozen=True)
class RunConfig:
    """Validated effective configuration."""

    raw: dict  # effective config dict (defaults merged with the user's file)

    @classmethod
    def from_dict(cls, user: dict) -> "RunConfig":
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        doc = _merge(DEFAULTS, user)
        _check_types(doc)
        if not isinstance(doc["policies"], list) or not doc["policies"]:
            raise ConfigError("policies must be a non-empty list")
        for i, entry in enumerate(doc["policies"]):
            _parse_policy(entry, i)
        if not 0 < doc["data"]["winsorize_pct"] < 100:
            raise ConfigError("data.winsorize_pct must lie in (0, 100)")
        if doc["data"]["test_hours"] < 1:
            raise ConfigError("data.test_hours must be >= 1")
        if doc["simulation"]["trials"] < 1:
            raise ConfigError("simulation.trials must be >= 1")
        if doc["simulation"]["scenario_pool"] < 1:
            raise ConfigError("simulation.scenario_pool must be >= 1")
        return cls(doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_dict(user)

    @classmethod
    def default(cls) -> "RunConfig":
        return cls.from_dict({})

    def override(self, **kwargs) -> "RunConfig":
        """CLI overrides: seed, out_dir, figures."""
        doc = copy.deepcopy(self.raw)
        if kwargs.get("seed") is not None:
            doc["simulation"]["base_seed"] = int(kwargs["seed"])
        if kwargs.get("out_dir") is not None:
            doc["output"]["dir"] = str(kwargs["out_dir"])
        if kwargs.get("figures") is not None:
            doc["output"]["figures"] = bool(kwargs["figures"])
        return RunConfig.from_dict(doc)

    # typed accessors -------------------------------------------------------

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def forecast(self) -> dict:
        return self.raw["forecast"]

    @property
    def simulation(self) -> dict:
        return self.raw["simulation"]

    @property
    def output(self) -> dict:
        return self.raw["output"]

    def storage_spec(self) -> StorageSpec:
        s = self.raw["storage"]
        return StorageSpec(
            charge_max=float(s["charge_max"]),
            discharge_max=float(s["discharge_max"]),
            capacity=float(s["capacity"]),
            spread=float(s["spread"]),
            horizon=int(s["horizon"]),
            terminal_target=None if s["terminal_target"] is None else float(s["terminal_target"]),
        )

    def policy_specs(self) -> list[PolicySpec]:
        return [_parse_policy(entry, i) for i, entry in enumerate(self.raw["policies"])]

    def q_init(self) -> float:
        q = self.simulation["q_init"]
        return self.storage_spec().capacity / 2.0 if q is None else float(q)

    def fingerprint_dict(self) -> dict:
        """Everything that determines the outputs (output location excluded)."""
        doc = copy.deepcopy(self.raw)
        doc.pop("output")
        return doc

    def run_id(self) -> str:
        blob = json.dumps(self.fingerprint_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]
