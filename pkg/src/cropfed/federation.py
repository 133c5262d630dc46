"""Hierarchical federated averaging: farms -> crop clusters -> global model.

Every season each farm subscribes to one crop cluster. A cluster runs its
own FedAvg rounds (local full-batch training on each member, then a
data-size weighted average), and at the end of the season the server
merges the cluster models, weighting each by its cluster's data volume.

Aggregation sums with ``math.fsum`` so results are correctly rounded and do
not depend on the order members are listed or updated in; that is what lets
parallel and serial schedules produce bit-identical seasons.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .config import ExperimentConfig
from .model import (DivergenceError, Dataset, ModelSpec, ParamVector, TrainConfig,
                    concat_datasets, init_params, local_update, mse_loss)
from .synth import (TAG_SUBSCRIBE, FarmProfile, GeneratorConfig, farm_offset_for,
                    generate_farm_dataset, make_crop_profiles, sub_seed)


@dataclass(frozen=True)
class SubscriptionPlan:
    assignments: dict[int, int]
    K: int

    def __post_init__(self):
        counts = [0] * self.K
        for farm_id, crop_id in self.assignments.items():
            if not 0 <= crop_id < self.K:
                raise ValueError(f"farm {farm_id}: crop_id {crop_id} outside [0, {self.K})")
            counts[crop_id] += 1
        empty = [k for k, c in enumerate(counts) if c == 0]
        if empty:
            raise ValueError(f"crops without any farm: {empty}")

    @property
    def N(self) -> int:
        return len(self.assignments)

    def members(self, crop_id: int) -> list[int]:
        return sorted(f for f, k in self.assignments.items() if k == crop_id)

    def cluster_sizes(self) -> list[int]:
        return [len(self.members(k)) for k in range(self.K)]


def subscribe_farms(N: int, K: int, seed: int) -> SubscriptionPlan:
    """Random seasonal subscription with at least one farm per crop.

    Farms ``0..K-1`` cover the crops through a seeded permutation; the rest
    pick a crop uniformly at random.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if N < K:
        raise ValueError(f"cannot cover {K} crops with {N} farms")
    rng = np.random.default_rng(sub_seed(seed, TAG_SUBSCRIBE))
    first = rng.permutation(K)
    rest = rng.integers(0, K, size=N - K)
    crops = [int(c) for c in first] + [int(c) for c in rest]
    return SubscriptionPlan({farm: crop for farm, crop in enumerate(crops)}, K)


def aggregation_weights(sizes: Sequence[int]) -> list[float]:
    if any(int(s) != s or s <= 0 for s in sizes):
        raise ValueError(f"sizes must be positive integers, got {list(sizes)}")
    total = sum(int(s) for s in sizes)
    # exact ratios: scaling every size by a common factor gives the same floats
    return [float(Fraction(int(s), total)) for s in sizes]


def weighted_average(models: Sequence[ParamVector], sizes: Sequence[int]) -> ParamVector:
    """Componentwise ``sum(n_i / sum(n) * w_i)``, correctly rounded."""
    if not models:
        raise ValueError("nothing to average")
    if len(models) != len(sizes):
        raise ValueError(f"{len(models)} models but {len(sizes)} sizes")
    spec = models[0].spec
    for m in models[1:]:
        if m.spec != spec:
            raise ValueError("cannot average models with different specs")
    weights = aggregation_weights(sizes)
    terms = np.stack([a * m.values for a, m in zip(weights, models)])
    return ParamVector(spec, [math.fsum(col) for col in terms.T])


@dataclass(frozen=True)
class Cluster:
    crop_id: int
    members: tuple[int, ...]
    model: ParamVector
    rounds: int

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(sorted(self.members)))
        if not self.members:
            raise ValueError(f"crop {self.crop_id}: cluster has no members")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")


@dataclass(frozen=True)
class MemberLoss:
    farm_id: int
    n: int
    loss_before: float
    loss_after: float


@dataclass(frozen=True)
class RoundLog:
    crop_id: int
    round_index: int
    members: tuple[MemberLoss, ...]
    cluster_loss: float

    @property
    def cluster_size(self) -> int:
        return sum(m.n for m in self.members)


@dataclass
class SeasonResult:
    spec: ModelSpec
    local_models: dict[int, ParamVector]
    crop_models: dict[int, ParamVector]
    global_model: ParamVector
    baseline_model: ParamVector
    cluster_sizes: dict[int, int]
    logs: list[RoundLog] = field(default_factory=list)


def _weighted_loss(model: ParamVector, datasets: Sequence[Dataset]) -> float:
    weights = aggregation_weights([ds.n for ds in datasets])
    return math.fsum(a * mse_loss(model, ds) for a, ds in zip(weights, datasets))


def run_cluster_rounds(cluster: Cluster, datasets: Mapping[int, Dataset], cfg: TrainConfig,
                       executor: ThreadPoolExecutor | None = None,
                       ) -> tuple[Cluster, list[RoundLog], dict[int, ParamVector]]:
    """Run the cluster's FedAvg rounds.

    Returns the updated cluster, one log per round, and each member's last
    local model (trained in the final round, before the final average).
    """
    missing = [f for f in cluster.members if f not in datasets]
    if missing:
        raise ValueError(f"crop {cluster.crop_id}: no dataset for farms {missing}")
    member_data = [datasets[f] for f in cluster.members]
    sizes = [ds.n for ds in member_data]
    theta = cluster.model
    logs: list[RoundLog] = []
    local: dict[int, ParamVector] = {}

    for t in range(cluster.rounds):
        def train(item: tuple[int, Dataset], theta=theta, t=t) -> ParamVector:
            farm_id, ds = item
            try:
                return local_update(theta, ds, cfg)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"crop {cluster.crop_id}, farm {farm_id}, round {t}: {exc}",
                    epoch=exc.epoch, farm_id=farm_id, round_index=t) from exc

        items = list(zip(cluster.members, member_data))
        if executor is None:
            updates = [train(it) for it in items]
        else:
            updates = list(executor.map(train, items))
        new_theta = weighted_average(updates, sizes)
        log = RoundLog(
            cluster.crop_id, t,
            tuple(MemberLoss(f, ds.n, mse_loss(theta, ds), mse_loss(w, ds))
                  for f, ds, w in zip(cluster.members, member_data, updates)),
            _weighted_loss(new_theta, member_data))
        losses = [log.cluster_loss] + [v for m in log.members for v in (m.loss_before, m.loss_after)]
        if not all(math.isfinite(v) for v in losses):
            raise DivergenceError(f"crop {cluster.crop_id}, round {t}: training loss overflowed",
                                  round_index=t)
        logs.append(log)
        local = dict(zip(cluster.members, updates))
        theta = new_theta

    return replace(cluster, model=theta), logs, local


def global_aggregate(clusters: Sequence[Cluster], cluster_sizes: Sequence[int]) -> ParamVector:
    """Merge cluster models, weighting cluster ``k`` by its data volume ``N_k``."""
    return weighted_average([c.model for c in clusters], cluster_sizes)


def centralized_baseline(all_datasets: Sequence[Dataset], spec: ModelSpec, cfg: TrainConfig,
                         total_epochs: int, seed: int) -> ParamVector:
    """One model trained on every farm's pooled data, crop labels ignored."""
    if total_epochs < 1:
        raise ValueError("total_epochs must be >= 1")
    pooled = concat_datasets(all_datasets)
    return local_update(init_params(spec, seed), pooled, replace(cfg, epochs=total_epochs))


def run_season(cfg: ExperimentConfig, plan: SubscriptionPlan, train_sets: Mapping[int, Dataset],
               init: ParamVector | None = None) -> SeasonResult:
    """One full season: per-crop FedAvg, global merge, pooled baseline.

    ``init`` overrides the shared starting model, e.g. to carry a previous
    season's global model forward.
    """
    spec = cfg.model_spec()
    train_cfg = cfg.train_config()
    theta_init = init if init is not None else init_params(spec, cfg.seed)
    if theta_init.spec != spec:
        raise ValueError("initial model does not match the configured model spec")

    clusters: list[Cluster] = []
    logs: list[RoundLog] = []
    local_models: dict[int, ParamVector] = {}
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for k in range(plan.K):
            cluster = Cluster(k, tuple(plan.members(k)), theta_init, cfg.rounds_for(k))
            cluster, cluster_logs, local = run_cluster_rounds(cluster, train_sets, train_cfg, executor)
            clusters.append(cluster)
            logs.extend(cluster_logs)
            local_models.update(local)
    finally:
        if executor is not None:
            executor.shutdown()

    sizes = {c.crop_id: sum(train_sets[f].n for f in c.members) for c in clusters}
    global_model = global_aggregate(clusters, [sizes[c.crop_id] for c in clusters])
    budget = max(cfg.rounds_for(k) for k in range(plan.K)) * cfg.E
    baseline = centralized_baseline([train_sets[f] for f in sorted(plan.assignments)],
                                    spec, train_cfg, budget, cfg.seed)
    # rounds=0 clusters never train; their members fall back to the cluster model
    for c in clusters:
        for f in c.members:
            local_models.setdefault(f, c.model)
    return SeasonResult(spec, dict(sorted(local_models.items())),
                        {c.crop_id: c.model for c in clusters}, global_model, baseline,
                        sizes, logs)


@dataclass
class World:
    """Everything generated for one experiment: subscription and farm data."""

    plan: SubscriptionPlan
    generator: GeneratorConfig
    farms: dict[int, FarmProfile]
    train: dict[int, Dataset]
    test: dict[int, Dataset]


def build_generator(cfg: ExperimentConfig) -> GeneratorConfig:
    g = cfg.generator
    profiles = make_crop_profiles(cfg.d, cfg.K, g.heterogeneity, cfg.seed,
                                  nonlinearity_scale=g.nonlinearity_scale,
                                  noise_std=g.noise_std, identical=g.identical_crops)
    return GeneratorConfig(cfg.d, tuple(profiles), g.feature_low, g.feature_high,
                           g.farm_offset_std, cfg.seed)


def build_world(cfg: ExperimentConfig) -> World:
    plan = subscribe_farms(cfg.N, cfg.K, cfg.seed)
    gen = build_generator(cfg)
    farms, train, test = {}, {}, {}
    for farm_id in sorted(plan.assignments):
        farm = FarmProfile(farm_id, plan.assignments[farm_id], farm_offset_for(gen, farm_id),
                           cfg.n_train_for(farm_id), cfg.generator.n_test)
        farms[farm_id] = farm
        train[farm_id], test[farm_id] = generate_farm_dataset(gen, farm)
    return World(plan, gen, farms, train, test)
