"""Model, cluster and cost parameters, plus layer-to-stage partitioning."""
from __future__ import annotations

import enum
import itertools
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

GIB = 1 << 30
SPOT_PRICE = 0.918
DEMAND_PRICE = 3.06
DEPTH_MULTIPLIER = 1.5


class InvalidConfiguration(ValueError):
    pass


@dataclass(frozen=True)
class LayerCost:
    forward_time: float
    backward_time: float
    weight_bytes: int
    activation_bytes: int
    # size of the tensor this layer hands to the next one; 0 means "use activation_bytes"
    output_bytes: int = 0

    def __post_init__(self):
        for name in ("forward_time", "backward_time", "weight_bytes", "activation_bytes"):
            if not getattr(self, name) > 0:
                raise InvalidConfiguration(f"layer {name} must be > 0, got {getattr(self, name)!r}")
        if self.output_bytes < 0:
            raise InvalidConfiguration("layer output_bytes must be >= 0")

    @classmethod
    def from_forward(cls, forward_time, weight_bytes, activation_bytes, backward_ratio=2.0, output_bytes=0):
        return cls(forward_time, forward_time * backward_ratio, weight_bytes, activation_bytes, output_bytes)

    @property
    def message_bytes(self) -> int:
        return self.output_bytes or self.activation_bytes

    def scaled(self, time_factor: float = 1.0, byte_factor: float = 1.0) -> "LayerCost":
        return LayerCost(
            self.forward_time * time_factor,
            self.backward_time * time_factor,
            self.weight_bytes * byte_factor,
            self.activation_bytes * byte_factor,
            self.output_bytes * byte_factor,
        )


@dataclass(frozen=True)
class ModelProfile:
    layers: tuple[LayerCost, ...]
    samples_per_iteration: int
    microbatches_per_iteration: int
    name: str = "model"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise InvalidConfiguration("model profile needs at least one layer")
        m = self.microbatches_per_iteration
        if m < 1:
            raise InvalidConfiguration("microbatches_per_iteration must be >= 1")
        if self.samples_per_iteration < 1 or self.samples_per_iteration % m:
            raise InvalidConfiguration(
                f"microbatches_per_iteration ({m}) must divide samples_per_iteration ({self.samples_per_iteration})"
            )

    def microbatch_size(self, pipelines: int = 1) -> float:
        """Samples per microbatch when `pipelines` data-parallel pipelines share the batch."""
        return self.samples_per_iteration / (self.microbatches_per_iteration * pipelines)

    def __len__(self):
        return len(self.layers)


@dataclass(frozen=True)
class CommModel:
    intra_zone_bytes_per_sec: float
    cross_zone_factor: float = 1.0
    per_message_latency: float = 0.0

    def __post_init__(self):
        if not self.intra_zone_bytes_per_sec > 0:
            raise InvalidConfiguration("comm rate must be > 0")
        if self.cross_zone_factor < 1:
            raise InvalidConfiguration("cross_zone_factor must be >= 1")
        if self.per_message_latency < 0:
            raise InvalidConfiguration("per_message_latency must be >= 0")

    def transfer_seconds(self, nbytes: float, cross_zone: bool = False) -> float:
        if math.isinf(self.intra_zone_bytes_per_sec):
            wire = 0.0
        else:
            wire = nbytes / self.intra_zone_bytes_per_sec
        if cross_zone:
            wire *= self.cross_zone_factor
        return self.per_message_latency + wire


FREE_COMM = CommModel(math.inf)


@dataclass(frozen=True)
class ClusterSpec:
    D: int
    P: int
    P_demand: int
    zones: tuple[str, ...] = ("a", "b", "c")
    gpus_per_node: int = 1
    gpu_mem_bytes: int = 16 * GIB
    cpu_mem_bytes: int = 61 * GIB
    spot_price_per_node_hour: float = SPOT_PRICE
    demand_price_per_node_hour: float = DEMAND_PRICE
    comm: CommModel = field(default_factory=lambda: FREE_COMM)

    def __post_init__(self):
        object.__setattr__(self, "zones", tuple(self.zones))
        if self.D < 1 or self.P < 1 or self.P_demand < 1:
            raise InvalidConfiguration("D, P and P_demand must be >= 1")
        if not self.zones:
            raise InvalidConfiguration("at least one zone is required")
        if self.spot_price_per_node_hour <= 0 or self.demand_price_per_node_hour <= 0:
            raise InvalidConfiguration("prices must be > 0")
        if self.gpus_per_node < 1:
            raise InvalidConfiguration("gpus_per_node must be >= 1")

    @property
    def target_size(self) -> int:
        return self.P * self.D

    @property
    def hybrid_depth(self) -> float:
        return self.P_demand * self.demand_price_per_node_hour / self.spot_price_per_node_hour

    def check_depth(self, rc_enabled: bool, multiplier: float = DEPTH_MULTIPLIER) -> bool:
        """Warn (never reject) when RC runs on a pipeline shallower than the sizing rule."""
        need = math.ceil(multiplier * self.P_demand)
        if rc_enabled and self.P < need:
            warnings.warn(f"pipeline depth {self.P} is below {need} recommended for redundant computation",
                          stacklevel=2)
            return False
        return True


@dataclass(frozen=True)
class StageCosts:
    """Per-stage totals; the engine only needs these, not the layer ranges."""
    forward: tuple[float, ...]
    backward: tuple[float, ...]
    weight_bytes: tuple[float, ...]
    activation_bytes: tuple[float, ...]
    message_bytes: tuple[float, ...]

    @property
    def depth(self) -> int:
        return len(self.forward)

    def successor(self, s: int) -> int:
        return (s + 1) % self.depth

    def merged(self, shadow: int, victim: int) -> "StageCosts":
        """Costs of the pipeline once `shadow` also runs `victim`'s layers."""
        if victim != (shadow + 1) % self.depth:
            raise InvalidConfiguration(f"stage {victim} is not the successor of {shadow}")
        keep = [i for i in range(self.depth) if i != victim]

        def fold(values, combine_msg=False):
            out = []
            for i in keep:
                v = values[i]
                if i == shadow:
                    v = values[victim] if combine_msg else v + values[victim]
                out.append(v)
            return tuple(out)

        return StageCosts(
            fold(self.forward), fold(self.backward), fold(self.weight_bytes),
            fold(self.activation_bytes), fold(self.message_bytes, combine_msg=True),
        )


    def grouped(self, g: int) -> "StageCosts":
        """Costs when each node hosts g consecutive stages."""
        if g < 1 or self.depth % g:
            raise InvalidConfiguration(f"{self.depth} stages do not split into groups of {g}")
        if g == 1:
            return self

        def fold(values, last=False):
            chunks = [values[i:i + g] for i in range(0, self.depth, g)]
            return tuple(c[-1] if last else sum(c) for c in chunks)

        return StageCosts(fold(self.forward), fold(self.backward), fold(self.weight_bytes),
                          fold(self.activation_bytes), fold(self.message_bytes, last=True))


class Objective(str, enum.Enum):
    balance_memory = "balance_memory"
    balance_time = "balance_time"


@dataclass(frozen=True)
class StagePartition:
    profile: ModelProfile
    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "ranges", tuple(tuple(r) for r in self.ranges))
        pos = 0
        for lo, hi in self.ranges:
            if lo != pos or hi <= lo:
                raise InvalidConfiguration(f"stage ranges must be contiguous and non-empty: {self.ranges}")
            pos = hi
        if pos != len(self.profile.layers):
            raise InvalidConfiguration("stage ranges must cover every layer")

    @property
    def depth(self) -> int:
        return len(self.ranges)

    @property
    def sizes(self) -> list[int]:
        return [hi - lo for lo, hi in self.ranges]

    def stage_layers(self, s: int) -> tuple[LayerCost, ...]:
        lo, hi = self.ranges[s]
        return self.profile.layers[lo:hi]

    def _sum(self, attr):
        return tuple(sum(getattr(x, attr) for x in self.stage_layers(s)) for s in range(self.depth))

    @property
    def forward(self):
        return self._sum("forward_time")

    @property
    def backward(self):
        return self._sum("backward_time")

    @property
    def weight_bytes(self):
        return self._sum("weight_bytes")

    @property
    def activation_bytes(self):
        return self._sum("activation_bytes")

    def costs(self) -> StageCosts:
        msg = tuple(self.stage_layers(s)[-1].message_bytes for s in range(self.depth))
        return StageCosts(self.forward, self.backward, self.weight_bytes, self.activation_bytes, msg)


def stage_times(partition) -> list[tuple[float, float]]:
    costs = partition.costs() if isinstance(partition, StagePartition) else partition
    return list(zip(costs.forward, costs.backward))


def _prefix(values):
    return list(itertools.accumulate(values, initial=0))


def partition_layers(profile: ModelProfile, P: int, objective="balance_memory") -> StagePartition:
    """Exact min-max contiguous partition.

    Among optimal partitions the one with the fewest layers on early stages
    wins (lexicographically smallest size vector).
    """
    objective = Objective(objective)
    L = len(profile.layers)
    if P < 1 or P > L:
        raise InvalidConfiguration(f"cannot split {L} layers into {P} stages")

    if objective is Objective.balance_memory:
        w = _prefix(x.weight_bytes for x in profile.layers)
        a = _prefix(x.activation_bytes for x in profile.layers)

        def cost(s, i, j):
            return (w[j] - w[i]) + (P - s) * (a[j] - a[i])
    else:
        t = _prefix(x.forward_time + x.backward_time for x in profile.layers)

        def cost(s, i, j):
            return t[j] - t[i]

    inf = math.inf
    # best[s][i]: optimal max cost for stages s.. covering layers i..L-1
    best = [[inf] * (L + 1) for _ in range(P + 1)]
    best[P][L] = 0.0
    for s in range(P - 1, -1, -1):
        remaining = P - s - 1
        for i in range(s, L - remaining):
            b = inf
            for j in range(i + 1, L - remaining + 1):
                v = max(cost(s, i, j), best[s + 1][j])
                if v < b:
                    b = v
            best[s][i] = b
    opt = best[0][0]
    tol = opt * 1e-9

    ranges = []
    i = 0
    for s in range(P):
        remaining = P - s - 1
        for j in range(i + 1, L - remaining + 1):
            if cost(s, i, j) <= opt + tol and best[s + 1][j] <= opt + tol:
                break
        ranges.append((i, j))
        i = j
    return StagePartition(profile, tuple(ranges))


def uniform_profile(n_layers: int, forward_time: float, backward_time: float | None = None,
                    weight_bytes: int = 1, activation_bytes: int = 1, samples: int | None = None,
                    microbatches: int = 1) -> ModelProfile:
    b = 2.0 * forward_time if backward_time is None else backward_time
    layer = LayerCost(forward_time, b, weight_bytes, activation_bytes)
    return ModelProfile((layer,) * n_layers, samples or microbatches, microbatches, name="uniform")


def costs_from_times(forward: Sequence[float], backward: Sequence[float] | None = None,
                     weight_bytes: Sequence[float] | None = None,
                     activation_bytes: Sequence[float] | None = None,
                     message_bytes: Sequence[float] | None = None) -> StageCosts:
    n = len(forward)
    backward = backward if backward is not None else [2.0 * f for f in forward]
    ones = [1.0] * n
    return StageCosts(tuple(forward), tuple(backward), tuple(weight_bytes or ones),
                      tuple(activation_bytes or ones), tuple(message_bytes or ones))
