"""Fill-drain pipeline parallelism for the decoder tail.

Stages are contiguous layer runs of the tail; micro-batches are contiguous
row ranges of the accumulated boundary batch. A schedule is data, validated
against its dependency invariants before anything executes, and a separate
virtual-clock simulator turns schedules plus stage costs into makespans.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import DecoderTail
from .tensor import ContractError, Tensor

FORWARD = "forward"
BACKWARD = "backward"


class PipelineError(Exception):
    pass


@dataclass
class StagePartition:
    """Contiguous, non-empty layer slices covering the tail exactly."""

    tail: DecoderTail
    slices: tuple[tuple[int, int], ...]

    @property
    def stage_count(self) -> int:
        return len(self.slices)

    def stage_forward(self, stage: int, x: Tensor, train: bool = False) -> Tensor:
        start, stop = self.slices[stage]
        return self.tail.forward_slice(x, start, stop, train)


def partition_tail(tail: DecoderTail, stages: int) -> StagePartition:
    """Cut the tail into ``stages`` sub-models.

    Two stages split between the CRBlocks; other counts balance parameter
    mass greedily while keeping every stage non-empty.
    """
    n = len(tail.layers)
    if stages < 1 or stages > n:
        raise PipelineError(f"stage count {stages} outside [1, {n}]")
    if stages == 1:
        return StagePartition(tail, ((0, n),))
    if stages == 2:
        crb5 = next(i for i, l in enumerate(tail.layers) if getattr(l, "k", None) == 5)
        return StagePartition(tail, ((0, crb5), (crb5, n)))

    counts = tail.layer_param_counts()
    slices = []
    start = 0
    for s in range(stages):
        if s == stages - 1:
            stop = n
        else:
            max_stop = n - (stages - s - 1)
            target = sum(counts[start:]) / (stages - s)
            stop = start + 1
            acc = counts[start]
            while stop < max_stop and acc + counts[stop] <= target:
                acc += counts[stop]
                stop += 1
        slices.append((start, stop))
        start = stop
    return StagePartition(tail, tuple(slices))


@dataclass(frozen=True)
class MicroBatchSet:
    """Disjoint ordered row ranges covering the accumulated batch."""

    ranges: tuple[tuple[int, int], ...]

    @property
    def count(self) -> int:
        return len(self.ranges)


def split_microbatches(n_rows: int, micro_batches: int) -> MicroBatchSet:
    """Near-equal contiguous ranges, larger ones first."""
    if micro_batches < 1:
        raise PipelineError(f"micro-batch count {micro_batches} must be >= 1")
    if micro_batches > n_rows:
        raise PipelineError(f"micro-batch count {micro_batches} exceeds {n_rows} rows")
    base, rem = divmod(n_rows, micro_batches)
    sizes = [base + 1] * rem + [base] * (micro_batches - rem)
    ranges = []
    start = 0
    for s in sizes:
        ranges.append((start, start + s))
        start += s
    return MicroBatchSet(tuple(ranges))


@dataclass(frozen=True)
class Slot:
    time: int
    stage: int
    micro_batch: int
    direction: str


@dataclass(frozen=True)
class PipelineSchedule:
    stages: int
    micro_batches: int
    slots: tuple[Slot, ...]


def make_schedule(stages: int, micro_batches: int) -> PipelineSchedule:
    """Fill-drain schedule: forward(q,p) at time p+q+1 (0-based p,q), then
    the mirrored backward phase once every forward has finished."""
    if stages < 1 or micro_batches < 1:
        raise PipelineError("stages and micro_batches must be >= 1")
    P, Q = stages, micro_batches
    fwd_span = P + Q - 1
    slots = []
    for q in range(Q):
        for p in range(P):
            slots.append(Slot(p + q + 1, p, q, FORWARD))
            slots.append(Slot(fwd_span + (Q - 1 - q) + (P - 1 - p) + 1, p, q, BACKWARD))
    slots.sort(key=lambda s: (s.time, s.stage, s.micro_batch))
    return PipelineSchedule(P, Q, tuple(slots))


def validate_schedule(schedule: PipelineSchedule) -> None:
    """Reject schedules that double-book a stage or break data dependencies."""
    P, Q = schedule.stages, schedule.micro_batches
    times = {}
    occupancy = set()
    for s in schedule.slots:
        key = (s.direction, s.micro_batch, s.stage)
        if key in times:
            raise ContractError(f"duplicate slot {key}")
        if s.direction not in (FORWARD, BACKWARD) or not (0 <= s.stage < P) or not (0 <= s.micro_batch < Q):
            raise ContractError(f"slot {s} outside schedule bounds")
        if (s.time, s.stage) in occupancy:
            raise ContractError(f"stage {s.stage} double-booked at time {s.time}")
        occupancy.add((s.time, s.stage))
        times[key] = s.time
    if len(times) != 2 * P * Q:
        raise ContractError(f"schedule has {len(times)} slots, expected {2 * P * Q}")
    for q in range(Q):
        for p in range(P):
            if p + 1 < P and times[(FORWARD, q, p)] >= times[(FORWARD, q, p + 1)]:
                raise ContractError(f"forward({q},{p}) must precede forward({q},{p + 1})")
            if p > 0 and times[(BACKWARD, q, p)] >= times[(BACKWARD, q, p - 1)]:
                raise ContractError(f"backward({q},{p}) must precede backward({q},{p - 1})")
            if times[(FORWARD, q, p)] >= times[(BACKWARD, q, p)]:
                raise ContractError(f"forward({q},{p}) must precede backward({q},{p})")
    last_fwd = max(times[(FORWARD, q, P - 1)] for q in range(Q))
    first_bwd = min(t for (d, _, _), t in times.items() if d == BACKWARD)
    if last_fwd >= first_bwd:
        raise ContractError("fill-drain violated: a backward starts before the last-stage forwards finish")


@dataclass
class PipelineContext:
    """Saved forward state needed to run the backward phase later."""

    partition: StagePartition
    microbatches: MicroBatchSet
    schedule: PipelineSchedule
    saved: dict
    train: bool


def pipeline_forward(partition: StagePartition, microbatches: MicroBatchSet,
                     schedule: PipelineSchedule, inputs: np.ndarray,
                     train: bool = False) -> tuple[Tensor, PipelineContext]:
    """Run the forward slots; returns the reassembled output and the context
    for the deferred backward phase."""
    validate_schedule(schedule)
    if microbatches.ranges[-1][1] != inputs.shape[0]:
        raise PipelineError(
            f"micro-batches cover {microbatches.ranges[-1][1]} rows, inputs have {inputs.shape[0]}")
    saved: dict = {}
    P = schedule.stages
    for slot in schedule.slots:
        if slot.direction != FORWARD:
            continue
        q, p = slot.micro_batch, slot.stage
        if p == 0:
            lo, hi = microbatches.ranges[q]
            x_in = Tensor(inputs[lo:hi].copy(), requires_grad=True)
        else:
            x_in = Tensor(saved[(q, p - 1)][1].data.copy(), requires_grad=True)
        out = partition.stage_forward(p, x_in, train)
        saved[(q, p)] = (x_in, out)
    outputs = Tensor(np.concatenate(
        [saved[(q, P - 1)][1].data for q in range(schedule.micro_batches)], axis=0))
    return outputs, PipelineContext(partition, microbatches, schedule, saved, train)


def pipeline_backward(ctx: PipelineContext, boundary_grads: np.ndarray) -> np.ndarray:
    """Run the backward slots seeded with d(loss)/d(tail output) rows.

    Parameter gradients accumulate onto the tail tensors in ascending
    micro-batch order regardless of slot timing; returns the gradient with
    respect to the full accumulated input.
    """
    schedule = ctx.schedule
    P, Q = schedule.stages, schedule.micro_batches
    if boundary_grads.shape[0] != ctx.microbatches.ranges[-1][1]:
        raise PipelineError(
            f"boundary gradient rows {boundary_grads.shape[0]} != batch rows {ctx.microbatches.ranges[-1][1]}")
    grad_stores = [dict() for _ in range(Q)]
    for slot in schedule.slots:
        if slot.direction != BACKWARD:
            continue
        q, p = slot.micro_batch, slot.stage
        x_in, out = ctx.saved[(q, p)]
        if p == P - 1:
            lo, hi = ctx.microbatches.ranges[q]
            seed = boundary_grads[lo:hi]
        else:
            seed = grad_stores[q][ctx.saved[(q, p + 1)][0]]
        T.backward_from(out, seed, into=grad_stores[q])

    # fixed reduction order: ascending micro-batch id
    for q in range(Q):
        for _, t in ctx.partition.tail.params.items():
            g = grad_stores[q].get(t)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g
    return np.concatenate([grad_stores[q][ctx.saved[(q, 0)][0]] for q in range(Q)], axis=0)


def execute_pipeline(partition: StagePartition, microbatches: MicroBatchSet,
                     schedule: PipelineSchedule, inputs: np.ndarray,
                     boundary_grads: np.ndarray, train: bool = False) -> tuple[Tensor, np.ndarray]:
    """Forward plus backward under one schedule; functionally equivalent to a
    monolithic whole-batch pass up to micro-batch summation order."""
    outputs, ctx = pipeline_forward(partition, microbatches, schedule, inputs, train)
    input_grad = pipeline_backward(ctx, boundary_grads)
    return outputs, input_grad


# ---------------------------------------------------------------------------
# virtual-clock timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StageCostModel:
    """Per-stage forward/backward slot costs and inter-stage transfer time."""

    forward: float | tuple[float, ...] = 1.0
    backward: float | tuple[float, ...] = 1.0
    transfer: float = 0.0

    def tf(self, stage: int) -> float:
        c = self.forward[stage] if isinstance(self.forward, tuple) else self.forward
        return float(c)

    def tb(self, stage: int) -> float:
        c = self.backward[stage] if isinstance(self.backward, tuple) else self.backward
        return float(c)

    def check(self, stages: int) -> None:
        costs = [self.tf(p) for p in range(stages)] + [self.tb(p) for p in range(stages)] + [self.transfer]
        if any(not np.isfinite(c) or c < 0 for c in costs):
            raise PipelineError(f"stage costs must be finite and >= 0: {costs}")


def simulate_makespan(schedule: PipelineSchedule, cost: StageCostModel) -> float:
    """Event-driven evaluation of the schedule; for uniform costs and zero
    transfer this equals (P + Q - 1) * (tf + tb)."""
    P = schedule.stages
    cost.check(P)
    stage_free = [0.0] * P
    finish: dict[tuple, float] = {}
    makespan = 0.0
    for slot in schedule.slots:
        q, p = slot.micro_batch, slot.stage
        if slot.direction == FORWARD:
            ready = 0.0 if p == 0 else finish[(FORWARD, q, p - 1)] + cost.transfer
            dur = cost.tf(p)
        else:
            if p == P - 1:
                ready = finish[(FORWARD, q, p)]
            else:
                ready = finish[(BACKWARD, q, p + 1)] + cost.transfer
            dur = cost.tb(p)
        start = max(stage_free[p], ready)
        end = start + dur
        stage_free[p] = end
        finish[(slot.direction, q, p)] = end
        makespan = max(makespan, end)
    return makespan


def no_pipeline_makespan(stages: int, micro_batches: int, cost: StageCostModel) -> float:
    """Same stage work run serially on one virtual device (no transfers)."""
    cost.check(stages)
    return micro_batches * sum(cost.tf(p) + cost.tb(p) for p in range(stages))


def bubble_fraction(stages: int, micro_batches: int) -> float:
    """Idle fraction of the fill-drain schedule under uniform costs."""
    return (stages - 1) / (micro_batches + stages - 1)


@dataclass(frozen=True)
class PipelineConfig:
    """How the base station runs its decoder tail each iteration."""

    stages: int = 2
    micro_batches: int = 2
    enabled: bool = True
    cost: StageCostModel = field(default_factory=StageCostModel)
