"""Run configuration: a versioned JSON schema with strict validation.

A config fully determines a run together with its seed; parse -> serialize
-> parse is the identity on resolved configs. Nested problem and delay
sections stay as plain dicts here and are turned into objects on demand.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from ..netsim import DelayModel, StragglerPolicy
from ..optim import MODES, ConfigError, EtaSchedule, OptimizerConfig
from ..problems import build_problem
from ..topology import MASK_RULE_EXAMPLE, MASK_RULE_LITERAL

SCHEMA_VERSION = 1

_ETA_DEFAULT = {"kind": "constant", "value": 0.1}
_DELAY_DEFAULT = {
    "base_compute_ms": 1.0,
    "jitter_max_ms": 0.0,
    "link_latency_ms": 1.0,
    "straggler": None,
}

_TOP_KEYS = {
    "schema_version", "P", "S", "tau", "T", "mode", "alpha", "beta", "eta",
    "b", "update_rule", "momentum", "problem", "delay", "seed", "out_dir",
    "mask_rule",
}


@dataclass(frozen=True)
class RunConfig:
    """Resolved experiment description; all fields populated."""

    P: int
    T: int
    mode: str
    problem: dict
    S: int = 1
    tau: Optional[int] = None
    alpha: bool = True
    beta: bool = False
    eta: dict = field(default_factory=lambda: dict(_ETA_DEFAULT))
    b: int = 1
    update_rule: str = "sgd"
    momentum: float = 0.9
    delay: dict = field(default_factory=lambda: dict(_DELAY_DEFAULT))
    seed: int = 0
    out_dir: str = "runs/run"
    mask_rule: str = MASK_RULE_EXAMPLE

    # -- construction --------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        unknown = set(raw) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        version = raw.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {version}")
        missing = {"P", "T", "mode", "problem"} - set(raw)
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        eta = dict(_ETA_DEFAULT)
        eta.update(raw.get("eta", {}))
        delay = dict(_DELAY_DEFAULT)
        delay.update(raw.get("delay", {}))
        if delay.get("straggler") is not None:
            delay["straggler"] = dict(delay["straggler"])
        cfg = cls(
            P=int(raw["P"]),
            T=int(raw["T"]),
            mode=raw["mode"],
            problem=dict(raw["problem"]),
            S=int(raw.get("S", 1)),
            tau=None if raw.get("tau") is None else int(raw["tau"]),
            alpha=bool(raw.get("alpha", raw.get("mode") == "wagma")),
            beta=bool(raw.get("beta", False)),
            eta=eta,
            b=int(raw.get("b", 1)),
            update_rule=raw.get("update_rule", "sgd"),
            momentum=float(raw.get("momentum", 0.9)),
            delay=delay,
            seed=int(raw.get("seed", 0)),
            out_dir=raw.get("out_dir", "runs/run"),
            mask_rule=raw.get("mask_rule", MASK_RULE_EXAMPLE),
        )
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def with_overrides(self, **kwargs) -> "RunConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg

    # -- derived objects ------------------------------------------------------

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mask_rule not in (MASK_RULE_EXAMPLE, MASK_RULE_LITERAL):
            raise ConfigError(f"unknown mask_rule {self.mask_rule!r}")
        self.optimizer_config().validate(self.P)
        self.delay_model()
        build_problem(self.problem)

    def optimizer_config(self) -> OptimizerConfig:
        eta = EtaSchedule(
            kind=self.eta.get("kind", "constant"),
            value=float(self.eta.get("value", 0.1)),
            decay_factor=float(self.eta.get("decay_factor", 0.5)),
            decay_every=int(self.eta.get("decay_every", 0)),
        )
        return OptimizerConfig(
            T=self.T, S=self.S, tau=self.tau, alpha=self.alpha, beta=self.beta,
            eta=eta, b=self.b, update_rule=self.update_rule, momentum=self.momentum,
        )

    def delay_model(self) -> DelayModel:
        d = self.delay
        straggler = None
        if d.get("straggler") is not None:
            s = d["straggler"]
            straggler = StragglerPolicy(
                victims_per_iteration=int(s["victims_per_iteration"]),
                extra_delay_ms=float(s["extra_delay_ms"]),
                selection_seed=int(s.get("selection_seed", 0)),
            )
        try:
            return DelayModel(
                base_compute_ms=float(d.get("base_compute_ms", 1.0)),
                jitter_max_ms=float(d.get("jitter_max_ms", 0.0)),
                link_latency_ms=float(d.get("link_latency_ms", 1.0)),
                straggler=straggler,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return RunConfig.from_dict(raw)
