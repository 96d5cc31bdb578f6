"""Declarative experiment configuration (TOML)."""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace

from .captions import StrategyPlan
from .errors import ConfigError
from .qtd import NPrimePolicy
from .synthworld import WorldConfig
from .ve import VeArch, VeTrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_N = 12


@dataclass(frozen=True)
class CasParams:
    epochs: int = 30
    lr: float = 0.5
    seed: int = 0
    batch_size: int = 32


@dataclass(frozen=True)
class VeParams:
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    alpha: float = 1.0
    ssl: bool = False
    warmup_epochs: int = 25
    warmup_lr: float = 1e-3
    d: int = 32
    heads: int = 2
    hidden: int = 32

    def train_config(self, ssl=None):
        return VeTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            seed=self.seed,
            alpha=self.alpha,
            ssl_enabled=self.ssl if ssl is None else ssl,
        )

    def arch(self, feature_dim):
        return VeArch(d=self.d, heads=self.heads, hidden=self.hidden, feature_dim=feature_dim)


@dataclass(frozen=True)
class QtdParams:
    folds: int = 5
    seed: int = 0
    epochs: int = 8
    lr: float = 0.01


@dataclass(frozen=True)
class AblationRow:
    name: str
    scorer: str = "ve"  # "none" (CAS only) or "ve"
    strategy: str = "RtoC"
    ssl: bool = False
    use_qtd: bool = True


DEFAULT_ABLATION = (
    AblationRow("CAS-only", scorer="none", use_qtd=False),
    AblationRow("CAS+VE", use_qtd=False),
    AblationRow("CAS+VE+QTD"),
    AblationRow("CAS+VE+SSL+QTD", ssl=True),
    AblationRow("SAR(R)", strategy="R"),
    AblationRow("SAR(C)", strategy="C"),
    AblationRow("SAR(RtoC)", strategy="RtoC"),
)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    cas: CasParams = field(default_factory=CasParams)
    ve: VeParams = field(default_factory=VeParams)
    qtd: QtdParams = field(default_factory=QtdParams)
    plan: StrategyPlan = field(default_factory=lambda: StrategyPlan("R", "C"))
    policy: NPrimePolicy = field(default_factory=lambda: NPrimePolicy(2, 8))
    N: int = DEFAULT_N
    output_dir: str = "runs/default"
    sweep_yes_no: tuple = (1, 2)
    sweep_other: tuple = tuple(range(1, DEFAULT_N + 1))
    ablation: tuple = DEFAULT_ABLATION

    def validate(self):
        self.world.validate()
        if not isinstance(self.N, int) or self.N < 1:
            raise ConfigError(f"N must be a positive integer, got {self.N!r}")
        self.policy.validate(train_n=self.N)
        for v in (*self.sweep_yes_no, *self.sweep_other):
            if not 1 <= v <= self.N:
                raise ConfigError(f"sweep value {v} outside [1, N={self.N}]")
        self.ve.train_config().validate()
        self.ve.arch(self.world.feature_dim)
        names = [r.name for r in self.ablation]
        if len(set(names)) != len(names):
            raise ConfigError("ablation row names must be unique")
        for r in self.ablation:
            if r.scorer not in ("none", "ve"):
                raise ConfigError(f"ablation row {r.name!r}: scorer must be 'none' or 've'")
            StrategyPlan.parse(r.strategy)
        return self

    def to_dict(self):
        d = {
            "world": self.world.to_dict(),
            "cas": asdict(self.cas),
            "ve": asdict(self.ve),
            "qtd": asdict(self.qtd),
            "strategy": self.plan.name,
            "policy": {"yes_no": self.policy.n_prime_yes_no, "other": self.policy.n_prime_other},
            "N": self.N,
            "output_dir": self.output_dir,
            "sweep": {"yes_no": list(self.sweep_yes_no), "other": list(self.sweep_other)},
            "ablation": [asdict(r) for r in self.ablation],
        }
        return d


def _section(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad [{where}] section: {exc}") from None


TOP_KEYS = {"world", "cas", "ve", "qtd", "strategy", "policy", "N", "output_dir", "sweep", "ablation", "seed"}


def config_from_dict(doc):
    unknown = sorted(set(doc) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    cfg = ExperimentConfig()
    changes = {}
    if "world" in doc:
        w = doc["world"]
        if not isinstance(w, dict):
            raise ConfigError("[world] must be a table")
        changes["world"] = WorldConfig.from_dict(w)
    for key, cls in (("cas", CasParams), ("ve", VeParams), ("qtd", QtdParams)):
        if key in doc:
            changes[key] = _section(cls, doc[key], key)
    if "seed" in doc:
        # one explicit seed fans out to every stage that was not given its own
        s = doc["seed"]
        if not isinstance(s, int):
            raise ConfigError(f"seed must be an integer, got {s!r}")
        for key, cls in (("cas", CasParams), ("ve", VeParams), ("qtd", QtdParams)):
            if "seed" not in doc.get(key, {}):
                changes[key] = replace(changes.get(key, getattr(cfg, key)), seed=s)
        if "seed" not in doc.get("world", {}):
            changes["world"] = replace(changes.get("world", cfg.world), seed=s)
    if "strategy" in doc:
        changes["plan"] = StrategyPlan.parse(str(doc["strategy"]))
    if "N" in doc:
        changes["N"] = doc["N"]
    if "policy" in doc:
        p = doc["policy"]
        if not isinstance(p, dict) or set(p) - {"yes_no", "other"}:
            raise ConfigError("[policy] accepts only 'yes_no' and 'other'")
        changes["policy"] = NPrimePolicy(p.get("yes_no", cfg.policy.n_prime_yes_no), p.get("other", cfg.policy.n_prime_other))
    if "output_dir" in doc:
        changes["output_dir"] = str(doc["output_dir"])
    if "sweep" in doc:
        sw = doc["sweep"]
        if not isinstance(sw, dict) or set(sw) - {"yes_no", "other"}:
            raise ConfigError("[sweep] accepts only 'yes_no' and 'other'")
        if "yes_no" in sw:
            changes["sweep_yes_no"] = tuple(sw["yes_no"])
        if "other" in sw:
            changes["sweep_other"] = tuple(sw["other"])
    elif "N" in doc:
        changes["sweep_other"] = tuple(range(1, int(doc["N"]) + 1))
    if "ablation" in doc:
        rows = doc["ablation"]
        if not isinstance(rows, list) or not rows:
            raise ConfigError("ablation must be a non-empty array of tables ([[ablation]])")
        changes["ablation"] = tuple(_section(AblationRow, r, "ablation") for r in rows)
    return replace(cfg, **changes).validate()


def load_config(path):
    """Parse and validate a TOML experiment file; raises ConfigError on the first violation."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    return config_from_dict(doc)
