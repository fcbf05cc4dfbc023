"""Asynchronous federated training loop.

One communication is: draw a client with probability proportional to
``1 / N_m`` (among clients with budget left), let it run a local round
against the current global posterior, apply its message on the server and
periodically evaluate on the held-out set.

Three engines share the loop:

``pvi``
    non-private local optimisation, one damped factor update per message.
``dp_pvi``
    the private local optimiser with per-client moments accounting; clients
    retire once another step would exceed ``epsilon_max``.
``global_vi``
    the server holds ``(mu, rho)`` and an Adagrad state; each message carries
    one stochastic gradient of the global free energy.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from fedbayes import expfam, privacy
from fedbayes.data import Dataset, PartitionSpec, partition
from fedbayes.exceptions import NonNormalizableError, PartitionError, RunComplete
from fedbayes.expfam import GaussianMoment, GaussianNatural
from fedbayes.model import VariationalParams, evaluate, kl_grad, per_example_grad
from fedbayes.pvi import (
    Adagrad,
    LocalOptConfig,
    ServerState,
    apply_damping,
    compute_delta,
    local_optimize,
    local_optimize_dp,
    server_apply,
)

logger = logging.getLogger(__name__)

ENGINES = ("global_vi", "pvi", "dp_pvi")
GLOBAL_VI_SCALINGS = ("total", "shard")

__all__ = [
    "ENGINES",
    "Schedule",
    "RunConfig",
    "RunRecord",
    "RunResult",
    "select_next_client",
    "global_vi_round",
    "GLOBAL_VI_SCALINGS",
    "run",
    "run_seeds",
    "final_metrics",
    "summarize",
    "sweep",
    "default_local_config",
]


def default_local_config(engine: str) -> LocalOptConfig:
    """Optimiser defaults for each engine."""
    if engine == "pvi":
        return LocalOptConfig(n_steps=25, learning_rate=2.0, damping=0.1, batch_size=100)
    if engine == "dp_pvi":
        return LocalOptConfig(n_steps=25, learning_rate=0.5, damping=0.1, batch_size=None,
                              sample_rate=0.02, persistent_accumulator=True)
    if engine == "global_vi":
        return LocalOptConfig(n_steps=1, learning_rate=0.05, damping=1.0, batch_size=100)
    raise ValueError(f"unknown engine {engine!r}")


@dataclass(frozen=True)
class RunConfig:
    """Settings of one simulated training run.

    ``privacy.delta`` is ignored unless ``fixed_delta`` is set; by default
    each client uses :func:`fedbayes.privacy.delta_for_client` on its shard
    size. ``privacy.sample_rate`` overrides ``local.sample_rate`` for the
    private engine. ``global_vi_scaling`` is passed to :func:`global_vi_round`.
    """

    engine: str = "pvi"
    local: LocalOptConfig = None
    privacy: privacy.PrivacyParams = field(default_factory=privacy.PrivacyParams)
    fixed_delta: bool = False
    max_communications: int = None
    eval_every: int = 1
    prior_mean: float = 0.0
    prior_variance: float = 1.0
    global_vi_scaling: str = "total"

    def __post_init__(self):
        if self.global_vi_scaling not in GLOBAL_VI_SCALINGS:
            raise ValueError(f"global_vi_scaling must be one of {GLOBAL_VI_SCALINGS}")
        if self.engine not in ENGINES:
            raise ValueError(f"engine must be one of {ENGINES}, got {self.engine!r}")
        if self.local is None:
            object.__setattr__(self, "local", default_local_config(self.engine))
        if self.max_communications is None:
            default = 50000 if self.engine == "global_vi" else 5000
            object.__setattr__(self, "max_communications", default)
        if self.max_communications < 0 or self.eval_every < 1:
            raise ValueError("max_communications must be >= 0 and eval_every >= 1")
        if not self.prior_variance > 0:
            raise ValueError("prior_variance must be positive")

    def prior(self, d: int) -> GaussianNatural:
        return expfam.to_natural(
            GaussianMoment(np.full(d, self.prior_mean), np.full(d, self.prior_variance))
        )


@dataclass(frozen=True)
class RunRecord:
    """Metrics after one evaluated communication."""

    communication: int
    client_id: int
    epsilon_spent: float
    test_accuracy: float
    test_avg_ll: float
    wall_clock: float

    CSV_FIELDS = ("communication", "client_id", "epsilon_spent", "test_accuracy", "test_avg_ll")

    def csv_row(self) -> list[str]:
        return [
            str(self.communication),
            str(self.client_id),
            repr(float(self.epsilon_spent)),
            repr(float(self.test_accuracy)),
            repr(float(self.test_avg_ll)),
        ]


@dataclass
class RunResult:
    """Everything a run produced."""

    records: list
    server: ServerState
    events: list
    exhausted_at: dict
    epsilons: list
    communications: int
    config: RunConfig = None
    seed: int = None

    @property
    def posterior(self) -> GaussianMoment:
        return expfam.to_moment(self.server.q)


class Schedule:
    """Asynchronous client selection with rate proportional to ``1 / N_m``."""

    def __init__(self, sizes):
        self.sizes = np.asarray(sizes, dtype=np.float64)
        if np.any(self.sizes <= 0):
            raise ValueError("every client needs at least one example")
        self.active = np.ones(self.sizes.size, dtype=bool)

    @property
    def weights(self) -> np.ndarray:
        raw = np.where(self.active, 1.0 / self.sizes, 0.0)
        total = raw.sum()
        return raw / total if total > 0 else raw

    def mark_exhausted(self, m: int):
        self.active[m] = False


def select_next_client(schedule: Schedule, rng) -> int:
    """Draw the next client to communicate.

    Raises:
        RunComplete: when no client is active.
    """
    if not schedule.active.any():
        raise RunComplete("every client has exhausted its budget")
    weights = schedule.weights
    # inverse-CDF draw: one uniform per communication, independent of how many clients remain
    u = rng.random()
    m = int(np.searchsorted(np.cumsum(weights), u, side="right"))
    m = min(m, weights.size - 1)
    while weights[m] == 0:
        m -= 1
    return m


class _GlobalVIState:
    def __init__(self, q: GaussianNatural, cfg: LocalOptConfig):
        self.vp = VariationalParams.from_moment(expfam.to_moment(q))
        self.opt = Adagrad(self.vp.flat(), cfg.learning_rate, cfg.adagrad_epsilon)


def global_vi_round(state: _GlobalVIState, prior: GaussianNatural, shard: Dataset, n_total: int,
                    cfg: LocalOptConfig, rng, scaling: str = "total") -> GaussianNatural:
    """One stochastic gradient step on the global free energy from one client.

    With ``scaling="total"`` the client sends its own estimate of the whole
    free-energy gradient, ``grad KL(q || prior) - (N_total / L) * sum_batch
    grad log p``, so the gradient's size does not depend on ``N_m``. With
    ``scaling="shard"`` the same estimate is weighted by ``N_m / N_total``.
    The two coincide up to a constant when shards are equal-sized. The
    server takes a single Adagrad step and the change in ``q`` is returned.
    """
    if scaling not in GLOBAL_VI_SCALINGS:
        raise ValueError(f"scaling must be one of {GLOBAL_VI_SCALINGS}")
    n_m = len(shard)
    q_before = expfam.to_natural(state.vp.to_moment())
    size = min(cfg.batch_size or n_m, n_m)
    batch = rng.choice(n_m, size=size, replace=False)
    weight = 1.0 if scaling == "total" else n_m / n_total
    grad = weight * kl_grad(state.vp, prior)
    per = per_example_grad(state.vp, shard.x[batch], shard.t[batch],
                           rng.standard_normal((size, shard.dim)))
    grad = grad - (weight * n_total / size) * per.sum(axis=0)
    state.vp = VariationalParams.from_flat(state.opt.step(grad))
    return expfam.divide(expfam.to_natural(state.vp.to_moment()), q_before)


def _client_privacy(config: RunConfig, n_m: int) -> privacy.PrivacyParams:
    if config.fixed_delta:
        return config.privacy
    return replace(config.privacy, delta=privacy.delta_for_client(n_m))


def run(config: RunConfig, shards, test: Dataset, seed: int = 0) -> RunResult:
    """Simulate one training run.

    Args:
        config: engine and hyperparameters.
        shards: one :class:`~fedbayes.data.Dataset` per client.
        test: held-out evaluation set, or ``None`` to skip evaluation.
        seed: root seed; the schedule and every client draw from independent
            child streams of it.

    Returns:
        A :class:`RunResult` whose ``records`` hold one row per evaluation.
    """
    m_clients = len(shards)
    d = shards[0].dim
    sizes = [len(s) for s in shards]
    n_total = int(sum(sizes))
    streams = np.random.SeedSequence(seed).spawn(m_clients + 1)
    sched_rng = np.random.default_rng(streams[0])
    client_rngs = [np.random.default_rng(s) for s in streams[1:]]

    prior = config.prior(d)
    server = ServerState.initial(prior, m_clients)
    schedule = Schedule(sizes)
    engine = config.engine
    local = config.local
    if engine == "dp_pvi":
        local = replace(local, sample_rate=config.privacy.sample_rate, batch_size=None)
        client_priv = [_client_privacy(config, n) for n in sizes]
    gvi = _GlobalVIState(server.q, local) if engine == "global_vi" else None
    if engine != "global_vi" and local.persistent_accumulator:
        for f in server.factors:
            f.accumulator = np.zeros(2 * d)
    epsilons = [0.0] * m_clients

    records, events, exhausted_at = [], [], {}
    start = time.perf_counter()
    comm = 0
    while comm < config.max_communications:
        try:
            m = select_next_client(schedule, sched_rng)
        except RunComplete:
            break
        shard = shards[m]
        factor = server.factors[m]
        try:
            if engine == "global_vi":
                delta = global_vi_round(gvi, prior, shard, n_total, local, client_rngs[m],
                                        config.global_vi_scaling)
            elif engine == "pvi":
                vp = local_optimize(shard.x, shard.t, factor.t_m, server.q, local, client_rngs[m],
                                    factor.accumulator)
                delta = apply_damping(compute_delta(vp.to_moment(), server.q), local.damping)
            else:
                vp, ledger, steps, exhausted = local_optimize_dp(
                    shard.x, shard.t, factor.t_m, server.q, local, client_priv[m],
                    factor.ledger, client_rngs[m], factor.accumulator,
                )
                factor.ledger = ledger
                epsilons[m] = privacy.epsilon(ledger, client_priv[m].delta)
                if exhausted:
                    factor.exhausted = True
                    schedule.mark_exhausted(m)
                if steps == 0:
                    # budget ran out before any data access: nothing is sent
                    exhausted_at.setdefault(m, comm)
                    continue
                delta = apply_damping(compute_delta(vp.to_moment(), server.q), local.damping)
                if exhausted:
                    exhausted_at[m] = comm
            server = server_apply(server, m, delta)
        except NonNormalizableError as err:
            # covers cavity collapse and rejected server updates; the round is skipped
            logger.info("communication %d from client %d skipped: %s", comm, m, err)
            events.append({"communication": comm, "client_id": m, "error": type(err).__name__,
                           "message": str(err)})
        comm += 1
        if test is not None and (comm % config.eval_every == 0 or comm == config.max_communications):
            records.append(_evaluate(server, test, comm, m, epsilons[m], start))

    if test is not None and comm and (not records or records[-1].communication != comm):
        records.append(_evaluate(server, test, comm, m, epsilons[m], start))
    return RunResult(records, server, events, exhausted_at, epsilons, comm, config, seed)


def _evaluate(server, test, comm, m, eps, start) -> RunRecord:
    acc, ll = evaluate(expfam.to_moment(server.q), test.x, test.t)
    return RunRecord(comm, m, eps, acc, ll, time.perf_counter() - start)


def _run_job(args):
    config, shards, test, seed = args
    return run(config, shards, test, seed)


def run_seeds(config: RunConfig, shards, test: Dataset, seeds, n_jobs: int = 1) -> list:
    """Run one configuration for several seeds, optionally in worker processes."""
    jobs = [(config, shards, test, s) for s in seeds]
    if n_jobs == 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_run_job, jobs))


def final_metrics(result: RunResult, last: int = 10) -> tuple[float, float]:
    """Mean accuracy and log likelihood over the final ``last`` evaluations."""
    tail = result.records[-last:]
    if not tail:
        raise ValueError("run produced no evaluations")
    return (float(np.mean([r.test_accuracy for r in tail])),
            float(np.mean([r.test_avg_ll for r in tail])))


def summarize(results, last: int = 10) -> dict:
    """Mean and sample standard deviation across seeds of the final metrics."""
    finals = np.array([final_metrics(r, last) for r in results])
    ddof = 1 if len(finals) > 1 else 0
    return {
        "n_seeds": len(finals),
        "accuracy_mean": float(finals[:, 0].mean()),
        "accuracy_std": float(finals[:, 0].std(ddof=ddof)),
        "avg_ll_mean": float(finals[:, 1].mean()),
        "avg_ll_std": float(finals[:, 1].std(ddof=ddof)),
        "final": [{"accuracy": float(a), "avg_ll": float(b)} for a, b in finals],
    }


def _sweep_cell(args):
    train, test, kappa, rho, m_clients, configs, seeds, partition_seed, last = args
    spec = PartitionSpec(m_clients=m_clients, rho=rho, kappa=kappa)
    try:
        idx = partition(train, spec, partition_seed)
    except PartitionError as err:
        return {"kappa": kappa, "rho": rho, "valid": False, "reason": str(err)}
    shards = [train.subset(i) for i in idx]
    means = {}
    for cfg in configs:
        finals = [final_metrics(run(cfg, shards, test, s), last) for s in seeds]
        means[cfg.engine] = np.mean(finals, axis=0)
    first, second = (means[c.engine] for c in configs)
    return {
        "kappa": kappa, "rho": rho, "valid": True,
        "accuracy_diff": float(first[0] - second[0]),
        "avg_ll_diff": float(first[1] - second[1]),
        **{f"{name}_accuracy": float(v[0]) for name, v in means.items()},
        **{f"{name}_avg_ll": float(v[1]) for name, v in means.items()},
    }


def sweep(train: Dataset, test: Dataset, grid, configs=None, seeds=(0, 1, 2, 3, 4),
          m_clients: int = 10, partition_seed: int = 0, last: int = 10,
          n_jobs: int = 1) -> list[dict]:
    """Compare two engines over a grid of ``(kappa, rho)`` partitions.

    Args:
        grid: iterable of ``(kappa, rho)`` pairs.
        configs: pair of :class:`RunConfig`; the reported differences are
            first minus second. Defaults to PVI versus global VI.

    Returns:
        One dict per cell. Cells whose partition is infeasible have
        ``valid=False`` and no metrics.
    """
    if configs is None:
        configs = (RunConfig(engine="pvi"), RunConfig(engine="global_vi"))
    if len(configs) != 2:
        raise ValueError("sweep compares exactly two configurations")
    jobs = [(train, test, float(k), float(r), m_clients, tuple(configs), tuple(seeds),
             partition_seed, last) for k, r in grid]
    if n_jobs == 1:
        return [_sweep_cell(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_sweep_cell, jobs))
