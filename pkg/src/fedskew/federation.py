"""FedAvg, the matched centralized SGD baseline, and the deterministic
(population-gradient) twin runs used for divergence bound checks."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientShard, LabeledDataset, population_distribution
from .errors import ConfigError, DataError, ShapeError
from .model import ModelParams, evaluate, prior_weighted_grad, sgd_step, weighted_loss_and_grad


@dataclass(frozen=True)
class FedConfig:
    K: int
    B: int
    E: int = 1
    eta0: float = 0.01
    decay: float = 1.0
    rounds: int = 1
    seed: int = 0
    T: int | None = None

    def __post_init__(self):
        for name in ("K", "B", "E"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", f"fed.{name}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0", "fed.rounds")
        if not self.eta0 > 0:
            raise ConfigError("eta0 must be positive", "fed.eta0")
        if not 0 < self.decay <= 1:
            raise ConfigError("decay must lie in (0, 1]", "fed.decay")
        if self.T is not None and self.T < 1:
            raise ConfigError("T must be >= 1", "fed.T")

    def eta(self, round_: int) -> float:
        return self.eta0 * self.decay**round_


@dataclass(frozen=True)
class RoundRecord:
    round: int
    global_params: ModelParams = field(repr=False)
    test_accuracy: float
    eta: float
    client_steps: tuple[int, ...] = ()


def _round_rng(seed: int, round_: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, round_]))


def _sgd_epochs(params, data: LabeledDataset, batch_size: int, epochs: int, eta: float, rng) -> ModelParams:
    X, y, n = data.features, data.labels, len(data)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, g = weighted_loss_and_grad(params, X[idx], y[idx], np.full(idx.size, 1.0 / idx.size))
            params = sgd_step(params, g, eta)
    return params


def local_steps(n: int, cfg: FedConfig) -> int:
    return cfg.E * math.ceil(n / cfg.B)


def local_train(params: ModelParams, shard: ClientShard, cfg: FedConfig, round_: int) -> ModelParams:
    """E epochs of mini-batch SGD on one client's shard, starting at ``params``.

    The shuffle stream depends only on ``(cfg.seed, round_)``.
    """
    if shard.n == 0:
        raise DataError(f"client {shard.client_id} has no data")
    if cfg.B > shard.n:
        raise ConfigError(f"B={cfg.B} exceeds client {shard.client_id} size {shard.n}", "fed.B")
    return _sgd_epochs(params, shard.data, cfg.B, cfg.E, cfg.eta(round_), _round_rng(cfg.seed, round_))


def aggregate(locals_: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Sample-size weighted average of client models.

    Computed as ``w_0 + sum_k (n_k/N) (w_k - w_0)`` in client order, which is
    algebraically the plain weighted mean but returns identical inputs bit-exactly.
    """
    if not locals_:
        raise ShapeError("nothing to aggregate")
    ns = [n for _, n in locals_]
    if any(n <= 0 for n in ns):
        raise DataError("client sample counts must be positive")
    total = float(sum(ns))
    anchor = locals_[0][0]
    dims = anchor.layer_dims
    acc = [(np.zeros_like(W), np.zeros_like(b)) for W, b in anchor.layers]
    for params, n in locals_:
        if params.layer_dims != dims:
            raise ShapeError(f"shape mismatch: {params.layer_dims} vs {dims}")
        w = n / total
        for (aW, ab), (W, b), (W0, b0) in zip(acc, params.layers, anchor.layers):
            aW += w * (W - W0)
            ab += w * (b - b0)
    return ModelParams(tuple((W0 + aW, b0 + ab) for (aW, ab), (W0, b0) in zip(acc, anchor.layers)))


def run_fedavg(
    shards: Sequence[ClientShard],
    test: LabeledDataset,
    init: ModelParams,
    cfg: FedConfig,
    workers: int | None = None,
) -> list[RoundRecord]:
    """All clients train from the current global model each round, then the
    server averages. Record 0 is the initial evaluation at round -1."""
    if not shards:
        raise DataError("no client shards")
    if cfg.K != len(shards):
        raise ConfigError(f"cfg.K={cfg.K} but {len(shards)} shards supplied", "fed.K")
    for s in shards:
        if cfg.B > s.n:
            raise ConfigError(f"B={cfg.B} exceeds client {s.client_id} size {s.n}", "fed.B")
    steps = tuple(local_steps(s.n, cfg) for s in shards)
    records = [RoundRecord(-1, init, evaluate(init, test), 0.0, steps)]
    global_params = init
    pool = ThreadPoolExecutor(workers) if workers and workers > 1 else None
    try:
        for r in range(cfg.rounds):
            if pool is None:
                trained = [local_train(global_params, s, cfg, r) for s in shards]
            else:
                trained = list(pool.map(lambda s: local_train(global_params, s, cfg, r), shards))
            global_params = aggregate([(w, s.n) for w, s in zip(trained, shards)])
            records.append(RoundRecord(r, global_params, evaluate(global_params, test), cfg.eta(r), steps))
    finally:
        if pool is not None:
            pool.shutdown()
    return records


def run_centralized(
    data: LabeledDataset, test: LabeledDataset, init: ModelParams, cfg: FedConfig
) -> list[RoundRecord]:
    """Pooled SGD with batch ``B*K`` and the FedAvg learning-rate schedule;
    one round is E epochs."""
    if len(data) == 0:
        raise DataError("empty training set")
    batch = cfg.B * cfg.K
    if batch > len(data):
        raise ConfigError(f"B*K={batch} exceeds dataset size {len(data)}", "fed.B")
    steps = (local_steps(len(data), FedConfig(1, batch, cfg.E)),)
    records = [RoundRecord(-1, init, evaluate(init, test), 0.0, steps)]
    params = init
    for r in range(cfg.rounds):
        params = _sgd_epochs(params, data, batch, cfg.E, cfg.eta(r), _round_rng(cfg.seed, r))
        records.append(RoundRecord(r, params, evaluate(params, test), cfg.eta(r), steps))
    return records


def records_to_csv(records: Sequence[RoundRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "eta", "test_accuracy"])
    for rec in records:
        w.writerow([rec.round, repr(rec.eta), repr(rec.test_accuracy)])
    return buf.getvalue()


def records_to_json(records: Sequence[RoundRecord]) -> str:
    return json.dumps(
        [
            {"round": r.round, "eta": r.eta, "test_accuracy": r.test_accuracy, "client_T": list(r.client_steps)}
            for r in records
        ],
        indent=1,
    )


# ----------------------------------------------------- deterministic twins


@dataclass
class DeterministicRun:
    """Weight trajectories of the population-gradient twins.

    ``central[t]`` is the centralized model after t steps. ``local[k][t]`` is
    client k after t steps (pre-averaging at sync points). ``fed[m]`` is the
    averaged model after m synchronizations.
    """

    T: int
    eta: float
    central: list[ModelParams]
    local: list[list[ModelParams]]
    fed: list[ModelParams]
    client_priors: list[np.ndarray]
    client_n: list[int]
    population: np.ndarray
    pooled: LabeledDataset

    def sync_divergence(self) -> list[float]:
        return [(self.fed[m] - self.central[m * self.T]).norm() for m in range(len(self.fed))]


def run_deterministic_pair(
    shards: Sequence[ClientShard],
    init: ModelParams,
    eta: float,
    T: int,
    m_rounds: int,
) -> DeterministicRun:
    """Full-gradient FedAvg and centralized runs from a shared init.

    Client k descends ``sum_i p_k(i) g_i(w)`` and the centralized twin descends
    ``sum_i p(i) g_i(w)``; ``g_i`` is the class-conditional gradient over the
    pooled data, so clients differ only in their label priors.
    """
    if not shards:
        raise DataError("no client shards")
    if not eta > 0 or T < 1 or m_rounds < 0:
        raise ConfigError("need eta > 0, T >= 1, m_rounds >= 0")
    pooled = LabeledDataset.concat([s.data for s in shards])
    population = population_distribution(shards).probs
    priors = [s.dist.probs for s in shards]
    ns = [s.n for s in shards]

    central = [init]
    local = [[init] for _ in shards]
    fed = [init]
    wc = init
    for _ in range(m_rounds):
        ws = [fed[-1]] * len(shards)
        for _ in range(T):
            ws = [w - eta * prior_weighted_grad(w, pooled, p) for w, p in zip(ws, priors)]
            for k, w in enumerate(ws):
                local[k].append(w)
            wc = wc - eta * prior_weighted_grad(wc, pooled, population)
            central.append(wc)
        fed.append(aggregate(list(zip(ws, ns))))
    return DeterministicRun(T, eta, central, local, fed, priors, ns, population, pooled)
