"""Split training loop: terminals exchange smashed data with the base
station instead of model parameters, and every exchanged scalar is counted.

Per iteration each UE uploads its encoder's boundary activations, the BTS
runs the shared decoder tail (optionally pipelined) over the accumulated
batch, disseminates the tail outputs, receives the boundary gradients back,
and everyone applies Adam to their own part.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as M
from . import pipeline as P
from . import tensor as T
from .metrics import MetricsRow
from .model import BoundaryDims, CsiDims
from .optim import AdamConfig, AdamState, adam_init, adam_step
from .tensor import Tensor

KIND_ENCODER_ACTIVATION = "encoder_activation"
KIND_TAIL_OUTPUT = "tail_output"
KIND_HEAD_BOUNDARY_GRAD = "head_boundary_grad"
KIND_ENCODER_BOUNDARY_GRAD = "encoder_boundary_grad"
MESSAGE_KINDS = (KIND_ENCODER_ACTIVATION, KIND_TAIL_OUTPUT,
                 KIND_HEAD_BOUNDARY_GRAD, KIND_ENCODER_BOUNDARY_GRAD)
UPLINK_KINDS = (KIND_ENCODER_ACTIVATION, KIND_HEAD_BOUNDARY_GRAD)


class ProtocolError(Exception):
    pass


@dataclass
class SmashedBatch:
    """One boundary activation or boundary-gradient message."""

    ue_id: int
    kind: str
    payload: Tensor
    scalar_count: int = -1

    def __post_init__(self):
        if self.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"unknown message kind '{self.kind}'")
        if self.payload.data.ndim != 2:
            raise ProtocolError(f"smashed payload must be 2-D (batch, width), got {self.payload.shape}")
        if self.scalar_count < 0:
            self.scalar_count = self.payload.size
        elif self.scalar_count != self.payload.size:
            raise ProtocolError(
                f"scalar_count {self.scalar_count} != payload size {self.payload.size}")


class CommLedger:
    """Cumulative exchanged-scalar counters per UE and link direction."""

    def __init__(self, n_ues: int):
        self.n_ues = n_ues
        self.uplink = [0] * n_ues
        self.downlink = [0] * n_ues
        self.iteration_log: list[tuple[int, int]] = []

    def add_uplink(self, ue_id: int, count: int) -> None:
        if count < 0:
            raise ProtocolError("ledger counters never decrease")
        self.uplink[ue_id] += count

    def add_downlink(self, ue_id: int, count: int) -> None:
        if count < 0:
            raise ProtocolError("ledger counters never decrease")
        self.downlink[ue_id] += count

    @property
    def total(self) -> int:
        return sum(self.uplink) + sum(self.downlink)

    def log_iteration(self, iteration: int) -> None:
        self.iteration_log.append((iteration, self.total))


@dataclass(frozen=True)
class FleetConfig:
    n_ues: int
    samples_per_ue: int
    batch_size: int
    iterations: int
    boundary: BoundaryDims
    seed: int = 0

    def __post_init__(self):
        if self.n_ues < 1:
            raise ProtocolError(f"need at least one UE, got {self.n_ues}")
        if not (1 <= self.batch_size <= self.samples_per_ue):
            raise ProtocolError(
                f"batch size {self.batch_size} outside [1, {self.samples_per_ue}]")
        if self.iterations < 1:
            raise ProtocolError(f"iteration count {self.iterations} must be >= 1")


def csilocal_comm_closed_form(fleet: FleetConfig, boundary=None,
                              iterations: Optional[int] = None) -> int:
    """K * N * 2 * B * (c1 + c2) exchanged scalars.

    ``boundary`` may be a BoundaryDims or a plain (c1, c2) pair, so degenerate
    widths can be priced even though they cannot be built.
    """
    b = boundary if boundary is not None else fleet.boundary
    c1, c2 = (b.c1, b.c2) if isinstance(b, BoundaryDims) else (b[0], b[1])
    k = iterations if iterations is not None else fleet.iterations
    return k * fleet.n_ues * 2 * fleet.batch_size * (c1 + c2)


class MinibatchSampler:
    """Without-replacement index draws, shared by all UEs in an iteration."""

    def __init__(self, n_samples: int, batch_size: int, seed: int):
        self.n_samples = n_samples
        self.batch_size = batch_size
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA7C4]))

    def next(self) -> np.ndarray:
        return self._rng.choice(self.n_samples, size=self.batch_size, replace=False)


@dataclass
class MessageRecord:
    iteration: int
    ue_id: int
    kind: str
    shape: tuple


def _tap(tap: Optional[list], iteration: int, msg: SmashedBatch) -> None:
    if tap is not None:
        tap.append(MessageRecord(iteration, msg.ue_id, msg.kind, msg.payload.shape))


def audit_messages(records: Sequence[MessageRecord], sample_shape: tuple) -> dict:
    """Confirm no protocol message carries raw CSI tensors.

    Every message must be of a boundary kind and 2-D; raw samples are
    rank-3 per sample. Returns per-kind counts, raises on any violation.
    """
    counts = {k: 0 for k in MESSAGE_KINDS}
    for rec in records:
        if rec.kind not in MESSAGE_KINDS:
            raise ProtocolError(f"non-boundary message kind '{rec.kind}' observed")
        if len(rec.shape) != 2 or rec.shape[1:] == tuple(sample_shape):
            raise ProtocolError(f"message of kind {rec.kind} has raw-sample shape {rec.shape}")
        counts[rec.kind] += 1
    return counts


# ---------------------------------------------------------------------------
# actors
# ---------------------------------------------------------------------------

class UserEquipment:
    """Holds the personal encoder and decoder head plus the local shard."""

    def __init__(self, ue_id: int, encoder: M.Encoder, head: M.DecoderHead,
                 train_data: np.ndarray, test_data: Optional[np.ndarray],
                 adam: AdamConfig):
        self.ue_id = ue_id
        self.encoder = encoder
        self.head = head
        self.train_data = train_data
        self.test_data = test_data
        self.enc_state: AdamState = adam_init(encoder.params, adam)
        self.head_state: AdamState = adam_init(head.params, adam)
        self._enc_out: Optional[Tensor] = None


class BaseStation:
    """Holds the shared decoder tail and its pipeline setup."""

    def __init__(self, tail: M.DecoderTail, adam: AdamConfig, pipeline_cfg: P.PipelineConfig,
                 total_rows: int):
        self.tail = tail
        self.tail_state: AdamState = adam_init(tail.params, adam)
        self.pipeline_cfg = pipeline_cfg
        self.partition = P.partition_tail(tail, pipeline_cfg.stages if pipeline_cfg.enabled else 1)
        q = pipeline_cfg.micro_batches if pipeline_cfg.enabled else 1
        self.microbatches = P.split_microbatches(total_rows, q)
        self.schedule = P.make_schedule(self.partition.stage_count, q)


# ---------------------------------------------------------------------------
# one iteration, step by step
# ---------------------------------------------------------------------------

def ue_forward_upload(ue: UserEquipment, batch_indices: np.ndarray,
                      ledger: CommLedger, train: bool = True) -> SmashedBatch:
    """Encoder forward on the local batch; uploads the boundary activations."""
    if batch_indices.size == 0:
        raise ProtocolError(f"UE {ue.ue_id}: empty batch")
    if batch_indices.min() < 0 or batch_indices.max() >= ue.train_data.shape[0]:
        raise ProtocolError(f"UE {ue.ue_id}: batch indices outside local shard")
    x = Tensor(ue.train_data[batch_indices])
    ue._enc_out = ue.encoder.forward(x, train)
    msg = SmashedBatch(ue.ue_id, KIND_ENCODER_ACTIVATION, ue._enc_out.detach())
    ledger.add_uplink(ue.ue_id, msg.scalar_count)
    return msg


def bts_accumulate(batches: Sequence[SmashedBatch], n_ues: int) -> Tensor:
    """Concatenate per-UE smashed data in ascending ue_id order."""
    by_id = {b.ue_id: b for b in batches}
    for ue_id in range(n_ues):
        if ue_id not in by_id:
            raise ProtocolError(f"missing smashed data from UE {ue_id}")
    widths = {by_id[i].payload.shape[1] for i in range(n_ues)}
    if len(widths) != 1:
        raise ProtocolError(f"smashed-data widths differ across UEs: {sorted(widths)}")
    data = np.concatenate([by_id[i].payload.data for i in range(n_ues)], axis=0)
    return Tensor(data, requires_grad=True)


def bts_tail_forward_disseminate(bts: BaseStation, accumulated: Tensor, n_ues: int,
                                 ledger: CommLedger, train: bool = True):
    """Tail forward over the accumulated batch; returns per-UE outputs plus
    the saved state needed for the deferred backward pass."""
    if accumulated.shape[0] % n_ues != 0:
        raise ProtocolError(
            f"accumulated rows {accumulated.shape[0]} not divisible by {n_ues} UEs")
    rows_per_ue = accumulated.shape[0] // n_ues
    if bts.pipeline_cfg.enabled:
        out, ctx = P.pipeline_forward(bts.partition, bts.microbatches, bts.schedule,
                                      accumulated.data, train)
    else:
        out = bts.tail.forward(accumulated, train)
        ctx = (accumulated, out)
    messages = []
    for ue_id in range(n_ues):
        payload = Tensor(out.data[ue_id * rows_per_ue:(ue_id + 1) * rows_per_ue].copy())
        msg = SmashedBatch(ue_id, KIND_TAIL_OUTPUT, payload)
        ledger.add_downlink(ue_id, msg.scalar_count)
        messages.append(msg)
    return messages, ctx


def ue_loss_and_backward(ue: UserEquipment, tail_output: SmashedBatch,
                         batch_indices: np.ndarray, ledger: CommLedger) -> tuple[float, SmashedBatch]:
    """Local loss through the decoder head; uploads d(loss)/d(tail output).

    Head parameter gradients are left on the head tensors; the encoder
    gradient waits for the boundary gradient from the BTS.
    """
    u = Tensor(tail_output.payload.data.copy(), requires_grad=True)
    targets = Tensor(ue.train_data[batch_indices])
    y = ue.head.forward(u, train=True)
    loss = M.nmse_loss(y, targets)
    loss_value = loss.item()
    if not np.isfinite(loss_value):
        raise ProtocolError(f"UE {ue.ue_id}: non-finite loss")
    T.backward(loss)
    msg = SmashedBatch(ue.ue_id, KIND_HEAD_BOUNDARY_GRAD, Tensor(u.grad.copy()))
    ledger.add_uplink(ue.ue_id, msg.scalar_count)
    return loss_value, msg


def bts_tail_backward(bts: BaseStation, grad_batches: Sequence[SmashedBatch], ctx,
                      n_ues: int, ledger: CommLedger,
                      average_over_ues: bool = False) -> list[SmashedBatch]:
    """Backward through the tail once over the accumulated batch.

    Tail parameter gradients sum the per-UE contributions (mean within each
    UE's mini-batch via the NMSE, sum across UEs); the optional average
    switch rescales only the parameter gradients by 1/N.
    """
    by_id = {b.ue_id: b for b in grad_batches}
    for ue_id in range(n_ues):
        if ue_id not in by_id:
            raise ProtocolError(f"missing boundary gradient from UE {ue_id}")
    seed = np.concatenate([by_id[i].payload.data for i in range(n_ues)], axis=0)
    if bts.pipeline_cfg.enabled:
        input_grad = P.pipeline_backward(ctx, seed)
    else:
        accumulated, out = ctx
        T.backward_from(out, seed)
        input_grad = accumulated.grad
    if average_over_ues:
        for _, t in bts.tail.params.items():
            if t.grad is not None:
                t.grad = t.grad / n_ues
    rows_per_ue = input_grad.shape[0] // n_ues
    messages = []
    for ue_id in range(n_ues):
        payload = Tensor(input_grad[ue_id * rows_per_ue:(ue_id + 1) * rows_per_ue].copy())
        msg = SmashedBatch(ue_id, KIND_ENCODER_BOUNDARY_GRAD, payload)
        ledger.add_downlink(ue_id, msg.scalar_count)
        messages.append(msg)
    return messages


def ue_apply_boundary_grad(ue: UserEquipment, grad_msg: SmashedBatch) -> None:
    """Complete the encoder backward pass with the received boundary gradient."""
    if ue._enc_out is None:
        raise ProtocolError(f"UE {ue.ue_id}: no saved encoder state")
    T.backward_from(ue._enc_out, grad_msg.payload.data)
    ue._enc_out = None


# ---------------------------------------------------------------------------
# full training run
# ---------------------------------------------------------------------------

@dataclass
class CsiLocalResult:
    ues: list[UserEquipment]
    bts: BaseStation
    ledger: CommLedger
    metrics: list[MetricsRow]


def evaluate_fleet(ues: Sequence[UserEquipment], tail: M.DecoderTail) -> tuple[float, list[float]]:
    """Pooled and per-UE test NMSE over the held-out shards (eval mode)."""
    per_ue = []
    weighted = 0.0
    total = 0
    for ue in ues:
        nmse = M.reconstruct_nmse(ue.encoder, tail, ue.head, ue.test_data)
        per_ue.append(nmse)
        weighted += nmse * ue.test_data.shape[0]
        total += ue.test_data.shape[0]
    return weighted / total, per_ue


def train_csilocal(fleet: FleetConfig, dims: CsiDims, adam: AdamConfig,
                   train_shards: Sequence[np.ndarray],
                   test_shards: Optional[Sequence[np.ndarray]] = None,
                   pipeline_cfg: Optional[P.PipelineConfig] = None,
                   *, bn_train: bool = True, eval_every: int = 50,
                   average_tail_grad: bool = False,
                   message_tap: Optional[list] = None,
                   model_seed: Optional[int] = None) -> CsiLocalResult:
    """Run the full split-training loop for ``fleet.iterations`` rounds.

    All holders start from the same deterministic initialization (the usual
    broadcast-at-startup convention); personal parts then diverge with the
    local data.
    """
    n = fleet.n_ues
    if len(train_shards) != n:
        raise ProtocolError(f"got {len(train_shards)} train shards for {n} UEs")
    if test_shards is not None and len(test_shards) != n:
        raise ProtocolError(f"got {len(test_shards)} test shards for {n} UEs")
    pipeline_cfg = pipeline_cfg or P.PipelineConfig()
    total_rows = n * fleet.batch_size
    if pipeline_cfg.enabled and pipeline_cfg.micro_batches > total_rows:
        raise ProtocolError(
            f"micro-batch count {pipeline_cfg.micro_batches} exceeds {total_rows} accumulated rows")

    model_seed = fleet.seed if model_seed is None else model_seed
    ues = []
    for ue_id in range(n):
        m = M.build_model(dims, fleet.boundary, model_seed)
        ues.append(UserEquipment(ue_id, m.encoder, m.head,
                                 train_shards[ue_id],
                                 test_shards[ue_id] if test_shards is not None else None,
                                 adam))
    tail = M.build_model(dims, fleet.boundary, model_seed).tail
    bts = BaseStation(tail, adam, pipeline_cfg, total_rows)
    ledger = CommLedger(n)
    sampler = MinibatchSampler(fleet.samples_per_ue, fleet.batch_size, fleet.seed)

    if pipeline_cfg.enabled:
        iter_time = P.simulate_makespan(bts.schedule, pipeline_cfg.cost)
    else:
        iter_time = P.no_pipeline_makespan(pipeline_cfg.stages, pipeline_cfg.micro_batches,
                                           pipeline_cfg.cost)

    can_eval = test_shards is not None
    metrics: list[MetricsRow] = []
    if can_eval:
        pooled, per_ue = evaluate_fleet(ues, tail)
        metrics.append(MetricsRow(0, 0, 0.0, None, pooled, per_ue))
    else:
        metrics.append(MetricsRow(0, 0, 0.0))

    clock = 0.0
    for k in range(1, fleet.iterations + 1):
        try:
            indices = sampler.next()
            for ue in ues:
                ue.encoder.params.zero_grad()
                ue.head.params.zero_grad()
            tail.params.zero_grad()

            uploads = []
            for ue in ues:
                msg = ue_forward_upload(ue, indices, ledger, train=bn_train)
                _tap(message_tap, k, msg)
                uploads.append(msg)
            accumulated = bts_accumulate(uploads, n)
            tail_outputs, ctx = bts_tail_forward_disseminate(bts, accumulated, n, ledger,
                                                             train=bn_train)
            losses = []
            grad_uploads = []
            for ue, out_msg in zip(ues, tail_outputs):
                _tap(message_tap, k, out_msg)
                loss, gmsg = ue_loss_and_backward(ue, out_msg, indices, ledger)
                _tap(message_tap, k, gmsg)
                losses.append(loss)
                grad_uploads.append(gmsg)
            enc_grads = bts_tail_backward(bts, grad_uploads, ctx, n, ledger,
                                          average_over_ues=average_tail_grad)
            for ue, emsg in zip(ues, enc_grads):
                _tap(message_tap, k, emsg)
                ue_apply_boundary_grad(ue, emsg)

            for ue in ues:
                adam_step(ue.encoder.params, ue.encoder.params.grads(), ue.enc_state, adam)
                adam_step(ue.head.params, ue.head.params.grads(), ue.head_state, adam)
            adam_step(tail.params, tail.params.grads(), bts.tail_state, adam)
        except Exception as exc:
            raise ProtocolError(f"iteration {k}: {exc}") from exc

        ledger.log_iteration(k)
        clock += iter_time
        train_nmse = float(np.mean(losses))
        if can_eval and (k % eval_every == 0 or k == fleet.iterations):
            pooled, per_ue = evaluate_fleet(ues, tail)
            metrics.append(MetricsRow(k, ledger.total, clock, train_nmse, pooled, per_ue))
        else:
            metrics.append(MetricsRow(k, ledger.total, clock, train_nmse))

    return CsiLocalResult(ues, bts, ledger, metrics)
