"""Flat key=value run configuration with typed validation.

Unknown keys are rejected; booleans accept true/false/1/0/yes/no. Secrets
(the HTTP backend URL and key) come from environment variables, never from
the file, so configs stay shareable and the hash stays meaningful.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigError
from .training import TrainConfig


@dataclass
class RunConfig:
    # data
    interactions: str = ""
    kg_ia: str = ""
    kg_ii: str = ""
    cap_per_attribute: int = 500
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    # model + training (defaults follow the published configuration)
    seed: int = 0
    learning_rate: float = 1e-4
    embed_dim: int = 64
    num_layers: int = 3
    num_experts: int = 8
    conf_scale: float = 5.0
    gumbel_tau: float = 0.9
    contrastive_tau: float = 0.2
    add_ratio: float = 0.60
    del_ratio: float = 0.08
    drop_prob: float = 0.01
    contrastive_weight: float = 1e-3
    reg_weight: float = 1e-4
    batch_size: int = 2048
    epochs: int = 100
    patience: int = 10
    sample_base: str = "ia"
    bpr_source: str = "mean_views"
    include_layer0: bool = False
    use_confidence: bool = True
    decision_mode: str = "hard_st"
    # augmenter
    subgraph_size: int = 32
    backend: str = "stub"
    replay_path: str = ""
    record_path: str = ""
    max_in_flight: int = 4
    request_budget: int = 0
    pools: str = ""
    # evaluation + explanation
    top_k: int = 10
    explain_mu: float = 0.0
    context_size: int = 5

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            embed_dim=self.embed_dim,
            num_layers=self.num_layers,
            num_experts=self.num_experts,
            conf_scale=self.conf_scale,
            gumbel_tau=self.gumbel_tau,
            contrastive_tau=self.contrastive_tau,
            add_ratio=self.add_ratio,
            del_ratio=self.del_ratio,
            drop_prob=self.drop_prob,
            contrastive_weight=self.contrastive_weight,
            reg_weight=self.reg_weight,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            patience=self.patience,
            sample_base=self.sample_base,
            bpr_source=self.bpr_source,
            include_layer0=self.include_layer0,
            use_confidence=self.use_confidence,
            decision_mode=self.decision_mode,
        )

    def validate(self) -> None:
        ratios = (self.train_ratio, self.val_ratio, self.test_ratio)
        if abs(sum(ratios) - 1.0) > 1e-9 or any(r < 0 for r in ratios):
            raise ConfigError(f"split ratios must be non-negative and sum to 1, got {ratios}")
        if self.cap_per_attribute < 1:
            raise ConfigError("cap_per_attribute must be >= 1")
        if self.subgraph_size < 1:
            raise ConfigError("subgraph_size must be >= 1")
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.request_budget < 0:
            raise ConfigError("request_budget must be >= 0")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.context_size < 0:
            raise ConfigError("context_size must be >= 0")
        if self.backend not in ("stub", "replay", "http"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        try:
            self.to_train_config().validate()
        except ConfigError:
            raise


_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, kind: type, raw: str):
    raw = raw.strip()
    if kind is bool:
        try:
            return _BOOL[raw.lower()]
        except KeyError:
            raise ConfigError(f"{name}: expected a boolean, got {raw!r}") from None
    try:
        return kind(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    types = {"str": str, "int": int, "float": float, "bool": bool}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, types[known[key]], value)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def load_config(path: str, overrides: dict | None = None) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    cfg = parse_config_text(text, source=path)
    if overrides:
        for key, value in overrides.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config override {key!r}")
            setattr(cfg, key, value)
        cfg.validate()
    return cfg


def config_hash(cfg: RunConfig) -> str:
    lines = sorted(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(RunConfig))
    return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()[:12]
