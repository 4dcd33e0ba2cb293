"""Hyperparameter containers, named presets and the sectioned JSON config file."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any

from .kernels import KernelHyper

# Values of the two fitted models reported for the Los Angeles CyberShake study.
PRESETS: dict[str, dict[str, float]] = {
    "ngmm1": dict(
        path_len=8.566, path_var=0.073, site_len=9.352, site_var=0.098,
        tau_dot2=0.0360, phi_dot2=0.0545, tau_ddot2=0.0553, phi_ddot2=0.0663,
    ),
    "ngmm2": dict(
        path_len=6.173, path_var=0.070, site_len=11.351, site_var=0.177,
        tau_dot2=0.0665, phi_dot2=0.0461, tau_ddot2=0.0567, phi_ddot2=0.0665,
    ),
}

# names of the parameters tuned by the trainer, in vector order
TUNED = ("site_len", "site_var", "path_len", "path_var", "tau_dot2", "phi_dot2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class HyperParams:
    site_len: float
    site_var: float
    path_len: float
    path_var: float
    tau_dot2: float
    phi_dot2: float
    tau_ddot2: float = 0.0
    phi_ddot2: float = 0.0
    matern_nu: float = 1.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or v != v or v in (float("inf"), float("-inf")):
                raise ConfigError(f"{f.name} must be a finite number")
            if v < 0:
                raise ConfigError(f"{f.name} must be non-negative")

    @property
    def kernel(self) -> KernelHyper:
        return KernelHyper(self.site_var, self.site_len, self.path_var, self.path_len, self.matern_nu)

    @property
    def secondary_var(self) -> float:
        return self.tau_dot2 + self.phi_dot2

    @property
    def primary_var(self) -> float:
        return self.tau_ddot2 + self.phi_ddot2

    def replace(self, **kw) -> "HyperParams":
        return replace(self, **kw)

    def to_dict(self) -> dict[str, float]:
        return asdict(self)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "HyperParams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def preset(cls, name: str) -> "HyperParams":
        try:
            return cls(**PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def load_config(path: str | Path | None) -> dict[str, Any]:
    """Read the sectioned JSON config. A missing path yields an empty config."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"cannot parse config {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object of sections")
    return cfg


def save_config(cfg: dict[str, Any], path: str | Path) -> None:
    p = Path(path)
    tmp = p.with_suffix(p.suffix + ".tmp")
    tmp.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(p)


def hyperparams_from_config(cfg: dict[str, Any], preset: str | None = None) -> HyperParams:
    """Resolve hyperparameters: preset first, then the ``hyperparams`` section on top."""
    section = dict(cfg.get("hyperparams", {}))
    name = preset or section.pop("preset", None)
    base = HyperParams.preset(name).to_dict() if name else {}
    section.pop("preset", None)
    base.update(section)
    vc = cfg.get("variance_components", {})
    for key in ("tau_ddot2", "phi_ddot2"):
        if key in vc:
            base[key] = vc[key]
    if not base:
        raise ConfigError("no hyperparameters: give a preset or a 'hyperparams' section")
    return HyperParams.from_dict(base)


def config_hash(cfg: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()
