"""Experiment configuration: one JSON object per experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace

from fedbayes.data import DISTRIBUTIONS, PartitionSpec
from fedbayes.privacy import PrivacyParams
from fedbayes.pvi import LocalOptConfig
from fedbayes.sim import ENGINES, RunConfig, default_local_config

__all__ = ["ExperimentConfig", "load_config", "save_config"]


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Optimiser fields left as ``None`` take the engine's default. When
    ``rho`` and ``kappa`` are both set they override ``distribution``.
    """

    data_dir: str | None = None
    missing: str = "category"
    split_seed: int = 0
    distribution: str = "A"
    rho: float | None = None
    kappa: float | None = None
    m_clients: int = 10
    partition_seed: int = 0
    n_total_override: int | None = None
    engine: str = "pvi"
    n_steps: int | None = None
    learning_rate: float | None = None
    damping: float | None = None
    batch_size: int | None = None
    persistent_accumulator: bool | None = None
    clip_c: float = 75.0
    noise_scale: float = 5.0
    sample_rate: float = 0.02
    epsilon_max: float = 1.0
    fixed_delta: float | None = None
    max_communications: int | None = None
    eval_every: int = 1
    prior_variance: float = 1.0
    global_vi_scaling: str = "total"
    seeds: tuple = (0,)
    last: int = 10
    kappa_grid: tuple = ()
    rho_grid: tuple = ()
    n_jobs: int = 1
    out: str = "out"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "kappa_grid", tuple(float(k) for k in self.kappa_grid))
        object.__setattr__(self, "rho_grid", tuple(float(r) for r in self.rho_grid))
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if (self.rho is None) != (self.kappa is None):
            raise ValueError("set both rho and kappa or neither")
        if self.rho is None and self.distribution.upper() not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {sorted(DISTRIBUTIONS)}")
        if self.missing not in ("drop", "category"):
            raise ValueError("missing must be 'drop' or 'category'")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.last < 1 or self.n_jobs < 1 or self.eval_every < 1:
            raise ValueError("last, n_jobs and eval_every must be positive")
        # build the derived objects once so invalid ranges fail here
        self.partition_spec()
        self.run_config()

    @property
    def distribution_label(self) -> str:
        if self.rho is not None:
            return f"rho={self.rho},kappa={self.kappa}"
        return self.distribution.upper()

    def partition_spec(self, rho=None, kappa=None) -> PartitionSpec:
        if rho is None:
            if self.rho is not None:
                rho, kappa = self.rho, self.kappa
            else:
                rho, kappa = DISTRIBUTIONS[self.distribution.upper()]
        return PartitionSpec(m_clients=self.m_clients, rho=rho, kappa=kappa,
                             n_total_override=self.n_total_override)

    def local_config(self, engine=None) -> LocalOptConfig:
        engine = engine or self.engine
        base = default_local_config(engine)
        overrides = {
            "n_steps": self.n_steps,
            "learning_rate": self.learning_rate,
            "damping": self.damping,
            "batch_size": self.batch_size,
            "persistent_accumulator": self.persistent_accumulator,
        }
        if engine == "global_vi":
            # one gradient step per message, applied undamped
            overrides.update(n_steps=None, damping=None)
        return replace(base, **{k: v for k, v in overrides.items() if v is not None})

    def run_config(self, engine=None) -> RunConfig:
        engine = engine or self.engine
        priv = PrivacyParams(
            clip_c=self.clip_c,
            noise_scale=self.noise_scale,
            sample_rate=self.sample_rate,
            delta=self.fixed_delta if self.fixed_delta is not None else 1e-4,
            epsilon_max=self.epsilon_max,
        )
        max_comm = self.max_communications if engine == self.engine else None
        return RunConfig(
            engine=engine,
            local=self.local_config(engine),
            privacy=priv,
            fixed_delta=self.fixed_delta is not None,
            max_communications=max_comm,
            eval_every=self.eval_every,
            prior_variance=self.prior_variance,
            global_vi_scaling=self.global_vi_scaling,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("seeds", "kappa_grid", "rho_grid"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **{k: v for k, v in kwargs.items() if v is not None})


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(config: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
