"""Weight divergence metrics and numerical checks of the divergence bound."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .data import ClassDistribution, ClientShard, LabeledDataset, PartitionSpec, emd, partition
from .errors import BoundInputError, ConfigError, DegenerateReferenceError, EmptyClassError
from .federation import DeterministicRun, FedConfig, run_centralized, run_deterministic_pair, run_fedavg
from .model import ModelParams, class_conditional_grad


@dataclass(frozen=True)
class DivergenceReport:
    total: float
    per_layer: list[tuple[str, float]]


def _ratio(diff: np.ndarray, ref: np.ndarray, what: str) -> float:
    denom = np.linalg.norm(ref)
    if denom == 0:
        raise DegenerateReferenceError(f"reference {what} has zero norm")
    return float(np.linalg.norm(diff) / denom)


def weight_divergence(w_fed: ModelParams, w_ref: ModelParams) -> DivergenceReport:
    """``||w_fed - w_ref|| / ||w_ref||`` overall and per layer (weight and bias together)."""
    diff = w_fed - w_ref
    per_layer = []
    for name, (dW, db), (W, b) in zip(w_ref.layer_names, diff.layers, w_ref.layers):
        per_layer.append((name, _ratio(np.concatenate([dW.ravel(), db]), np.concatenate([W.ravel(), b]), name)))
    return DivergenceReport(_ratio(diff.flatten(), w_ref.flatten(), "model"), per_layer)


def class_gradient_norms(params: ModelParams, data: LabeledDataset) -> np.ndarray:
    C = params.layer_dims[-1]
    return np.array([class_conditional_grad(params, data, i).norm() for i in range(C)])


def g_max(params: ModelParams, data: LabeledDataset) -> float:
    """Largest class-conditional gradient norm."""
    return float(class_gradient_norms(params, data).max())


# ------------------------------------------------------ Lipschitz estimate


@dataclass(frozen=True)
class ProbeSpec:
    pairs: int = 64
    radius: float | None = None  # None: verify_bound picks the observed divergence scale
    seed: int = 0
    safety_factor: float = 1.5


def estimate_lipschitz(
    data: LabeledDataset,
    class_i: int,
    probe: ProbeSpec,
    anchors: Sequence[ModelParams],
) -> float:
    """Safety-scaled max of ``||g_i(w) - g_i(w')|| / ||w - w'||`` over random
    pairs drawn in a ball of ``probe.radius`` around the anchor models."""
    if probe.pairs < 1:
        raise ConfigError("probe needs at least one pair", "bound.pairs")
    if probe.radius is None or not probe.radius > 0:
        raise ConfigError("probe radius must be positive", "bound.radius")
    if not anchors:
        raise ConfigError("no anchor models to probe around")
    if not np.any(data.labels == class_i):
        raise EmptyClassError(f"no examples of class {class_i}")
    rng = np.random.default_rng(np.random.SeedSequence([probe.seed, class_i]))
    dims = anchors[0].layer_dims
    best = 0.0
    for _ in range(probe.pairs):
        base = anchors[int(rng.integers(len(anchors)))].flatten()
        ends = []
        for _ in range(2):
            u = rng.standard_normal(base.size)
            u *= probe.radius * rng.uniform() / np.linalg.norm(u)
            ends.append(base + u)
        dist = np.linalg.norm(ends[0] - ends[1])
        if dist == 0:
            continue
        g = [class_conditional_grad(ModelParams.unflatten(e, dims), data, class_i).flatten() for e in ends]
        best = max(best, float(np.linalg.norm(g[0] - g[1]) / dist))
    return probe.safety_factor * best


# ------------------------------------------------------------ bound terms


@dataclass(frozen=True)
class BoundInputs:
    eta: float
    T: int
    lambdas: np.ndarray
    client_dists: list
    client_n: list[int]
    population_dist: object
    gmax_trace: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=np.float64)
        trace = np.asarray(self.gmax_trace, dtype=np.float64)
        if np.any(lam < 0) or np.any(trace < 0):
            raise BoundInputError("lambdas and gmax entries must be non-negative")
        if len(self.client_dists) != len(self.client_n) or not self.client_n:
            raise BoundInputError("one distribution and one count per client")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "gmax_trace", trace)

    def weights(self) -> np.ndarray:
        n = np.asarray(self.client_n, dtype=np.float64)
        return n / n.sum()

    def amplification(self) -> np.ndarray:
        """``1 + eta * sum_i p_k(i) lambda_i`` per client."""
        return np.array([1.0 + self.eta * float(np.dot(_p(d), self.lambdas)) for d in self.client_dists])

    def client_emd(self) -> np.ndarray:
        return np.array([emd(d, self.population_dist) for d in self.client_dists])


def _p(d) -> np.ndarray:
    return d.probs if isinstance(d, ClassDistribution) else np.asarray(d, dtype=np.float64)


# Which centralized g_max samples enter the round-m sum:
#   "full":      j = 0..T-1, g_max(w_c[mT-1-j])
#   "skip_last": j = 1..T-1, drops the most recent step; tighter but can
#                undercut the measured divergence, so only for comparison
BOUND_VARIANTS = ("full", "skip_last")


def bound_rhs(prev_divergence: float, inputs: BoundInputs, m: int, variant: str = "full") -> float:
    """Upper bound on ``||w_fed(mT) - w_central(mT)||`` given the previous
    synchronization's divergence."""
    if variant not in BOUND_VARIANTS:
        raise ConfigError(f"unknown bound variant {variant!r}", "bound.variant")
    if prev_divergence < 0:
        raise BoundInputError("prev_divergence must be >= 0")
    if m < 1:
        raise BoundInputError("synchronization index starts at 1")
    T = inputs.T
    if len(inputs.gmax_trace) < m * T:
        raise BoundInputError(f"gmax_trace has {len(inputs.gmax_trace)} entries, round {m} needs {m * T}")
    start = 1 if variant == "skip_last" else 0
    j = np.arange(start, T)
    g = inputs.gmax_trace[m * T - 1 - j]
    total = 0.0
    for wk, a, e in zip(inputs.weights(), inputs.amplification(), inputs.client_emd()):
        total += wk * (a**T * prev_divergence + inputs.eta * e * float(np.sum(a**j * g)))
    return float(total)


@dataclass
class BoundRow:
    m: int
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class BoundCheckReport:
    rows: list[BoundRow]
    lambdas: np.ndarray
    variant: str
    reestimated: bool = False
    tolerance: float = 1e-9
    lambda_source: str = "estimated"

    @property
    def passed(self) -> bool:
        return all(r.slack >= -self.tolerance for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "lhs", "rhs", "slack"])
        for r in self.rows:
            w.writerow([r.m, repr(r.lhs), repr(r.rhs), repr(r.slack)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "passed": self.passed,
                "variant": self.variant,
                "lambda_source": self.lambda_source,
                "reestimated": self.reestimated,
                "lambdas": self.lambdas.tolist(),
                "rows": [{"m": r.m, "lhs": r.lhs, "rhs": r.rhs, "slack": r.slack} for r in self.rows],
            },
            indent=1,
        )


def bound_inputs_from_run(run: DeterministicRun, lambdas) -> BoundInputs:
    gmax_trace = np.array([g_max(w, run.pooled) for w in run.central[:-1]])
    return BoundInputs(run.eta, run.T, np.asarray(lambdas, float), run.client_priors, run.client_n, run.population, gmax_trace)


def check_bound(run: DeterministicRun, inputs: BoundInputs, variant: str = "full") -> list[BoundRow]:
    """Chain the bound through every synchronization, feeding each round the
    measured divergence of the previous one."""
    lhs = run.sync_divergence()
    return [BoundRow(m, lhs[m], bound_rhs(lhs[m - 1], inputs, m, variant)) for m in range(1, len(lhs))]


def _probe_radius(run: DeterministicRun) -> float:
    # widest client-vs-central gap seen along the run
    gap = max(
        (w - run.central[t]).norm()
        for traj in run.local
        for t, w in enumerate(traj)
    )
    return max(gap, 1e-3)


def estimate_all_lipschitz(run: DeterministicRun, probe: ProbeSpec) -> np.ndarray:
    C = run.central[0].layer_dims[-1]
    return np.array([estimate_lipschitz(run.pooled, i, probe, run.central) for i in range(C)])


def verify_bound(
    shards: Sequence[ClientShard],
    init: ModelParams,
    eta: float,
    T: int,
    m_rounds: int,
    probe: ProbeSpec = ProbeSpec(),
    lambda_override=None,
    variant: str = "full",
) -> BoundCheckReport:
    """Run the deterministic twins and compare measured divergence with the
    bound at each synchronization. A failure under estimated Lipschitz
    constants triggers one re-estimate with twice the probe pairs."""
    run = run_deterministic_pair(shards, init, eta, T, m_rounds)
    if lambda_override is not None:
        C = init.layer_dims[-1]
        lambdas = np.broadcast_to(np.asarray(lambda_override, dtype=np.float64), (C,)).copy()
        inputs = bound_inputs_from_run(run, lambdas)
        return BoundCheckReport(check_bound(run, inputs, variant), lambdas, variant, lambda_source="override")

    if probe.radius is None:
        probe = replace(probe, radius=_probe_radius(run))
    lambdas = estimate_all_lipschitz(run, probe)
    inputs = bound_inputs_from_run(run, lambdas)
    report = BoundCheckReport(check_bound(run, inputs, variant), lambdas, variant)
    if report.passed:
        return report
    probe = replace(probe, pairs=2 * probe.pairs, seed=probe.seed + 1)
    lambdas = np.maximum(lambdas, estimate_all_lipschitz(run, probe))
    inputs = replace(inputs, lambdas=lambdas)
    return BoundCheckReport(check_bound(run, inputs, variant), lambdas, variant, reestimated=True)


# --------------------------------------------------------- EMD sweep


@dataclass
class SweepRow:
    emd: float
    rep: int
    layer: str
    divergence: float


@dataclass
class SweepTable:
    raw: list[SweepRow]
    accuracy: dict[float, list[float]] = field(default_factory=dict)

    def layers(self) -> list[str]:
        seen = []
        for r in self.raw:
            if r.layer not in seen:
                seen.append(r.layer)
        return seen

    def summary(self) -> list[tuple[float, str, float, float]]:
        """``(emd, layer, mean, std)`` per grid point and layer, 'total' first."""
        out = []
        grid = sorted({r.emd for r in self.raw})
        for e in grid:
            for layer in self.layers():
                vals = np.array([r.divergence for r in self.raw if r.emd == e and r.layer == layer])
                out.append((e, layer, float(vals.mean()), float(vals.std())))
        return out

    def mean_total(self) -> list[tuple[float, float]]:
        return [(e, mean) for e, layer, mean, _ in self.summary() if layer == "total"]

    def accuracy_summary(self) -> list[tuple[float, float, float]]:
        return [(e, float(np.mean(v)), float(np.std(v))) for e, v in sorted(self.accuracy.items())]

    def divergence_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["emd", "layer", "mean", "std"])
        for e, layer, mean, std in self.summary():
            w.writerow([repr(e), layer, repr(mean), repr(std)])
        return buf.getvalue()

    def raw_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["emd", "rep", "layer", "value"])
        for r in self.raw:
            w.writerow([repr(r.emd), r.rep, r.layer, repr(r.divergence)])
        return buf.getvalue()

    def accuracy_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["emd", "mean_accuracy", "std_accuracy"])
        for e, mean, std in self.accuracy_summary():
            w.writerow([repr(e), repr(mean), repr(std)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(
            {
                "divergence": [
                    {"emd": e, "layer": layer, "mean": m, "std": s} for e, layer, m, s in self.summary()
                ],
                "accuracy": [{"emd": e, "mean": m, "std": s} for e, m, s in self.accuracy_summary()],
            },
            indent=1,
        )


def divergence_vs_emd_sweep(
    dataset: LabeledDataset,
    emd_grid: Sequence[float],
    reps: int,
    cfg: FedConfig,
    init: ModelParams,
    test: LabeledDataset | None = None,
    seed: int = 0,
) -> SweepTable:
    """For each EMD and repetition: partition, train FedAvg and centralized SGD
    from ``init``, and record the divergence after the first round. With a test
    set, FedAvg continues for ``cfg.rounds`` rounds and its final accuracy is
    kept as well."""
    if reps < 1:
        raise ConfigError("reps must be >= 1", "sweep.reps")
    raw: list[SweepRow] = []
    accuracy: dict[float, list[float]] = {}
    one_round = replace(cfg, rounds=1)
    fed_cfg = cfg if test is not None else one_round
    for gi, e in enumerate(emd_grid):
        for rep in range(reps):
            rep_seed = int(np.random.SeedSequence([seed, gi, rep]).generate_state(1)[0])
            shards = partition(dataset, PartitionSpec.target_emd(cfg.K, float(e), rep_seed))
            pooled = LabeledDataset.concat([s.data for s in shards])
            ref_test = test if test is not None else pooled
            fed = run_fedavg(shards, ref_test, init, fed_cfg)
            central = run_centralized(pooled, ref_test, init, one_round)
            report = weight_divergence(fed[1].global_params, central[1].global_params)
            raw.append(SweepRow(float(e), rep, "total", report.total))
            raw.extend(SweepRow(float(e), rep, name, v) for name, v in report.per_layer)
            if test is not None:
                accuracy.setdefault(float(e), []).append(fed[-1].test_accuracy)
    return SweepTable(raw, accuracy)
