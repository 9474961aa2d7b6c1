"""Data-sharing mitigation: a class-balanced global share distributed to clients."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClassDistribution, ClientShard, LabeledDataset, emd, largest_remainder
from .errors import ConfigError, ShareError
from .federation import FedConfig, RoundRecord, run_fedavg
from .model import ModelParams, evaluate, sgd_step, weighted_loss_and_grad


@dataclass(frozen=True)
class ShareConfig:
    beta: float
    alpha: float
    warmup_steps: int = 0
    seed: int = 0
    warmup_eta: float | None = None
    warmup_batch: int | None = None

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]", "share.beta")
        if not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]", "share.alpha")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0", "share.warmup_steps")


def share_size(D_size: int, beta: float, num_classes: int) -> int:
    return num_classes * int(round(beta * D_size / num_classes))


def build_global_share(holdout: LabeledDataset, D_size: int, beta: float, seed: int) -> LabeledDataset:
    """Class-uniform sample of the holdout with ``|G| ~= beta * D_size``."""
    C = holdout.num_classes
    size = share_size(D_size, beta, C)
    if size == 0:
        raise ShareError(f"beta={beta} with |D|={D_size} gives an empty share")
    per_class = size // C
    rng = np.random.default_rng(seed)
    chosen = []
    for i in range(C):
        pool = np.flatnonzero(holdout.labels == i)
        if pool.size < per_class:
            raise ShareError(f"holdout has {pool.size} examples of class {i}, need {per_class}")
        chosen.append(rng.choice(pool, per_class, replace=False))
    return holdout.subset(np.sort(np.concatenate(chosen)))


def distribute_share(G: LabeledDataset, alpha: float, K: int, seed: int) -> list[LabeledDataset]:
    """One random ``round(alpha*|G|)`` sample of G per client.

    Samples are stratified by class, so each portion is as close to class-uniform
    as its size allows. Portions of different clients may overlap.
    """
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]", "share.alpha")
    size = int(round(alpha * len(G)))
    C = G.num_classes
    pools = [np.flatnonzero(G.labels == i) for i in range(C)]
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(K):
        # which classes get the spare examples when size is not a multiple of C
        tiebreak = rng.permutation(C)
        base = largest_remainder(np.full(C, 1.0 / C), size)
        counts = np.empty(C, dtype=np.int64)
        counts[tiebreak] = np.sort(base)[::-1]
        picks = [rng.choice(pool, c, replace=False) for pool, c in zip(pools, counts)]
        out.append(G.subset(np.sort(np.concatenate(picks))))
    return out


def warmup(
    G: LabeledDataset, init: ModelParams, steps: int, eta: float, B: int, seed: int
) -> ModelParams:
    """``steps`` mini-batch SGD steps on G, reshuffling every pass."""
    if steps < 0:
        raise ConfigError("warmup steps must be >= 0", "share.warmup_steps")
    if steps == 0:
        return init
    if B > len(G):
        raise ConfigError(f"warm-up batch {B} exceeds |G|={len(G)}", "share.warmup_batch")
    rng = np.random.default_rng(seed)
    params = init
    order = np.empty(0, dtype=np.int64)
    for _ in range(steps):
        if order.size < B:
            order = np.concatenate([order, rng.permutation(len(G))])
        idx, order = order[:B], order[B:]
        _, g = weighted_loss_and_grad(params, G.features[idx], G.labels[idx], np.full(B, 1.0 / B))
        params = sgd_step(params, g, eta)
    return params


def merge_shards(
    shards: Sequence[ClientShard], portions: Sequence[LabeledDataset], seed: int
) -> list[ClientShard]:
    """Append each client's share portion to its private data, shuffled.

    Shared rows carry index -1 in the merged shard's provenance array.
    """
    rng = np.random.default_rng(seed)
    merged = []
    for shard, extra in zip(shards, portions):
        data = LabeledDataset.concat([shard.data, extra])
        prov = np.concatenate([shard.indices, np.full(len(extra), -1, dtype=np.int64)])
        order = rng.permutation(len(data))
        merged.append(ClientShard(shard.client_id, data.subset(order), prov[order]))
    return merged


def expected_merged_distribution(shard: ClientShard, s: int) -> np.ndarray:
    """``(n p_k + s u) / (n + s)`` for a class-uniform addition of size s."""
    C = shard.data.num_classes
    return (shard.n * shard.dist.probs + s * np.full(C, 1.0 / C)) / (shard.n + s)


@dataclass
class SharingReport:
    beta: float
    alpha: float
    share_size: int
    portion_size: int
    warmup_accuracy: float
    shared: list[RoundRecord]
    control: list[RoundRecord]
    emd_before: list[float]
    emd_after: list[float]

    @property
    def final_shared(self) -> float:
        return self.shared[-1].test_accuracy

    @property
    def final_control(self) -> float:
        return self.control[-1].test_accuracy

    def trajectory_csv(self, with_alpha: bool = False, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow((["alpha"] if with_alpha else []) + ["round", "accuracy_shared", "accuracy_control"])
        for a, b in zip(self.shared, self.control):
            row = [a.round, repr(a.test_accuracy), repr(b.test_accuracy)]
            w.writerow(([repr(self.alpha)] if with_alpha else []) + row)
        return buf.getvalue()

    def emd_csv(self, with_alpha: bool = False, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow((["alpha"] if with_alpha else []) + ["client_id", "emd_before", "emd_after"])
        for k, (b, a) in enumerate(zip(self.emd_before, self.emd_after)):
            w.writerow(([repr(self.alpha)] if with_alpha else []) + [k, repr(b), repr(a)])
        return buf.getvalue()


def run_sharing_experiment(
    shards: Sequence[ClientShard],
    holdout: LabeledDataset,
    test: LabeledDataset,
    init: ModelParams,
    base_cfg: FedConfig,
    share_cfg: ShareConfig,
    control: list[RoundRecord] | None = None,
) -> SharingReport:
    """FedAvg on private+shared data versus FedAvg on private data alone.

    Both arms start from the same warm-up model. A precomputed ``control``
    trajectory may be passed to skip rerunning the unchanged arm.
    """
    D_size = sum(s.n for s in shards)
    seeds = np.random.SeedSequence([share_cfg.seed]).generate_state(4)
    G = build_global_share(holdout, D_size, share_cfg.beta, int(seeds[0]))
    eta = share_cfg.warmup_eta if share_cfg.warmup_eta is not None else base_cfg.eta0
    B = share_cfg.warmup_batch if share_cfg.warmup_batch is not None else min(base_cfg.B, len(G))
    start = warmup(G, init, share_cfg.warmup_steps, eta, B, int(seeds[1]))

    portions = distribute_share(G, share_cfg.alpha, len(shards), int(seeds[2]))
    merged = merge_shards(shards, portions, int(seeds[3]))

    pop_before = ClassDistribution.from_counts(sum(s.data.class_counts() for s in shards))
    pop_after = ClassDistribution.from_counts(sum(s.data.class_counts() for s in merged))
    emd_before = [emd(s.dist, pop_before) for s in shards]
    emd_after = [emd(s.dist, pop_after) for s in merged]

    shared = run_fedavg(merged, test, start, base_cfg)
    if control is None:
        control = run_fedavg(shards, test, start, base_cfg)
    return SharingReport(
        beta=share_cfg.beta,
        alpha=share_cfg.alpha,
        share_size=len(G),
        portion_size=len(portions[0]),
        warmup_accuracy=evaluate(start, test),
        shared=shared,
        control=control,
        emd_before=emd_before,
        emd_after=emd_after,
    )
