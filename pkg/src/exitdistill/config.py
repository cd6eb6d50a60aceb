"""Run configuration: flat INI sections with typed defaults and a resolved snapshot."""
from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path

from .data import GROUPS, DatasetHeader, PlantedSpec
from .distill import DistillPlan
from .model import ConfigError, ModelConfig

ROLES = ("teacher", "mentor", "student")

DEFAULTS = {
    "run": {"seed": 0, "seeds": 5, "jobs": 1},
    "planted": {"label_noise": 0.6, "nonlinear": True, "interaction": 1.5, "interaction_terms": 4,
                "disagreement": 0.1, "max_duration": 1,
                **{f"weight_{g}": w for g, w in PlantedSpec().weights.items()}},
    "dataset": {"num_videos": 100, "segments_per_video": 60, "annotators": 20, "num_classes": 5,
                **{f"dim_{g}": d for g, d in DatasetHeader().dims.items()},
                "split": "0.6,0.2,0.2", "compress": False},
    "teacher": {"hidden_dim": 32, "depth": 6, "exit_depths": "1,2,3,4,5,6"},
    "mentor": {"hidden_dim": 16, "depth": 4, "exit_depths": "1,2,3,4"},
    "student": {"hidden_dim": 8, "depth": 4, "exit_depths": "1,2,3,4"},
    "plan": {"phi": 0.5, "psi": 0.25, "lam": 0.5, "temperature": 1.0, "epochs": 20,
             "batch_size": 32, "learning_rate": 0.05},
    "routing": {"tau_sweep": "0.5:1.0:0.01", "max_f1_drop": 3.0, "calibrate_epochs": 10,
                "calibrate_learning_rate": 0.05, "prototype": "mean", "repetitions": 3},
    "eval": {"budget": 0.15, "agg": "mean"},
    "ablate": {"groups": "T;T+Tr;T+Tr+Ge;T+Tr+Ge+Sd"},
}


def _coerce(section: str, key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            v = raw.strip().lower()
            if v not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return v in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {type(default).__name__}") from None


class RunConfig:
    """Resolved configuration. Role sections are all-or-nothing: a file that
    names any of [teacher]/[mentor]/[student] defines exactly the roles it lists."""

    def __init__(self, sections: dict | None = None):
        self.sections = copy.deepcopy(DEFAULTS) if sections is None else sections

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as e:
            raise ConfigError(f"{source}: {str(e).splitlines()[0]}") from None
        cfg = cls()
        unknown = [s for s in parser.sections() if s not in DEFAULTS]
        if unknown:
            raise ConfigError(f"unknown config section [{unknown[0]}]")
        if any(parser.has_section(r) for r in ROLES):
            for r in ROLES:
                if not parser.has_section(r):
                    del cfg.sections[r]
        for s in parser.sections():
            for key, raw in parser.items(s):
                cfg.set(s, key, raw)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_text(path.read_text(), str(path))

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _coerce(section, key, value, default)
        self.sections.setdefault(section, dict(DEFAULTS[section]))[key] = value

    def get(self, section: str, key: str):
        if section not in self.sections:
            raise ConfigError(f"config section [{section}] is required here but missing")
        return self.sections[section][key]

    def has_role(self, role: str) -> bool:
        return role in self.sections

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for s in DEFAULTS:
            if s in self.sections:
                parser[s] = {k: str(v) for k, v in self.sections[s].items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    # --- builders ----------------------------------------------------------

    @property
    def seed(self) -> int:
        return self.get("run", "seed")

    def planted(self) -> PlantedSpec:
        p = self.sections["planted"]
        return PlantedSpec(weights={g: p[f"weight_{g}"] for g in GROUPS}, label_noise=p["label_noise"],
                           nonlinear=p["nonlinear"], interaction=p["interaction"],
                           interaction_terms=p["interaction_terms"], disagreement=p["disagreement"],
                           max_duration=p["max_duration"])

    def header(self) -> DatasetHeader:
        d = self.sections["dataset"]
        return DatasetHeader(dims={g: d[f"dim_{g}"] for g in GROUPS}, num_classes=d["num_classes"],
                             annotators=d["annotators"], seed=self.seed)

    def split_fractions(self) -> tuple:
        raw = self.get("dataset", "split")
        try:
            parts = tuple(float(x) for x in raw.split(","))
        except ValueError:
            raise ConfigError(f"[dataset] split: expected three comma-separated fractions, got {raw!r}") from None
        return parts

    def model_config(self, role: str, input_dim: int) -> ModelConfig:
        if role not in self.sections:
            raise ConfigError(f"config section [{role}] is required here but missing")
        r = self.sections[role]
        try:
            depths = tuple(int(x) for x in str(r["exit_depths"]).split(",") if x.strip())
        except ValueError:
            raise ConfigError(f"[{role}] exit_depths must be comma-separated integers") from None
        return ModelConfig(input_dim, r["hidden_dim"], r["depth"], depths,
                           self.get("dataset", "num_classes"), seed=self.seed * 10 + ROLES.index(role) + 1)

    def plan(self, input_dim: int, mode: str, roles: dict | None = None) -> DistillPlan:
        """Plan from the [plan] section; ``roles`` replaces the configured role models."""
        if roles is None:
            roles = {r: self.model_config(r, input_dim) if self.has_role(r) else None for r in ROLES}
        roles = {r: roles.get(r) for r in ROLES}
        if roles["teacher"] is None:
            raise ConfigError("config section [teacher] is required")
        p = self.sections["plan"]
        return DistillPlan(**roles, phi=p["phi"], psi=p["psi"], lam=p["lam"], temperature=p["temperature"],
                           epochs=p["epochs"], batch_size=p["batch_size"], learning_rate=p["learning_rate"],
                           seed=self.seed, mode=mode, budget=self.get("eval", "budget"))

    def taus(self) -> list:
        return parse_tau_sweep(self.get("routing", "tau_sweep"))

    def keep_sets(self) -> list:
        return [k for k in self.get("ablate", "groups").split(";") if k.strip()]


def parse_tau_sweep(text: str) -> list:
    """``a:b:step`` -> ascending taus from a to b inclusive, rounded to 10 decimals."""
    try:
        a, b, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise ConfigError(f"tau sweep must look like a:b:step, got {text!r}") from None
    if not (0.0 <= a <= b <= 1.0) or step <= 0:
        raise ConfigError(f"tau sweep needs 0 <= a <= b <= 1 and step > 0, got {text!r}")
    n = int(round((b - a) / step + 1e-9))
    taus = [round(a + k * step, 10) for k in range(n + 1)]
    if taus[-1] < b - 1e-12:
        taus.append(b)
    return [min(t, b) for t in taus]
