"""Federated comparison algorithms with matched models, data and ledgers.

FedAvg/FedProx run local Adam steps then upload the shared parameter
subset; FedGrad uploads gradients and the server applies a global Adam
step. The Per variants keep the encoder local and exchange only the
decoder tail and head. Every round costs 2 * d_shared scalars per UE.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import model as M
from . import tensor as T
from .metrics import MetricsRow
from .model import CsiDims, CsiModel, ModelPartParams
from .optim import AdamConfig, adam_init, adam_step
from .protocol import CommLedger, FleetConfig, MinibatchSampler, ProtocolError
from .tensor import Tensor

FAMILIES = ("fedavg", "fedprox", "fedgrad")
BASELINE_NAMES = ("fedavg", "fedavgper", "fedprox", "fedproxper", "fedgrad", "fedgradper")


class BaselineError(Exception):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    family: str
    personalized: bool = False
    mu: float = 0.01
    local_steps: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise BaselineError(f"unknown baseline family '{self.family}'")
        if self.mu < 0:
            raise BaselineError(f"prox coefficient must be >= 0, got {self.mu}")
        if self.local_steps < 1:
            raise BaselineError(f"local steps must be >= 1, got {self.local_steps}")
        if self.family == "fedgrad" and self.local_steps != 1:
            raise BaselineError("fedgrad uploads one gradient per round (local_steps must be 1)")

    @classmethod
    def from_name(cls, name: str, mu: float = 0.01, local_steps: int = 1) -> "BaselineSpec":
        key = name.lower()
        personalized = key.endswith("per")
        family = key[:-3] if personalized else key
        if family not in FAMILIES:
            raise BaselineError(f"unknown baseline '{name}'")
        return cls(family, personalized, mu, local_steps)

    @property
    def name(self) -> str:
        return self.family + ("per" if self.personalized else "")

    @property
    def shared_parts(self) -> tuple[str, ...]:
        return ("tail", "head") if self.personalized else ("encoder", "tail", "head")


def shared_subset(spec: BaselineSpec, encoder: ModelPartParams, tail: ModelPartParams,
                  head: ModelPartParams) -> dict[str, Tensor]:
    """The exchanged parameter view, keyed by 'part/name'."""
    parts = {"encoder": encoder, "tail": tail, "head": head}
    out: dict[str, Tensor] = {}
    for part in spec.shared_parts:
        for name, t in parts[part].items():
            out[f"{part}/{name}"] = t
    return out


def shared_subset_size(spec: BaselineSpec, d1: int, d2: int, d3: int) -> int:
    return d2 + d3 if spec.personalized else d1 + d2 + d3


def fedprox_penalty_grad(local: ModelPartParams, global_values: dict[str, np.ndarray],
                         mu: float) -> dict[str, np.ndarray]:
    """mu * (theta_local - theta_global) per shared parameter."""
    out = {}
    for name, t in local.items():
        out[name] = mu * (t.data - global_values[name])
    return out


def baseline_comm_closed_form(spec: BaselineSpec, d1: int, d2: int, d3: int,
                              n_ues: int, rounds: int) -> int:
    """2 * K * N * d_shared (one download plus one upload per UE per round)."""
    return 2 * rounds * n_ues * shared_subset_size(spec, d1, d2, d3)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _parts(model: CsiModel) -> dict[str, object]:
    return {"encoder": model.encoder, "tail": model.tail, "head": model.head}


def _bn_states(part) -> list[T.BatchNormState]:
    states = []
    for layer in part.layers:
        if isinstance(layer, M.BatchNorm2d):
            states.append(layer.state)
        elif isinstance(layer, M.CRBlock):
            states.append(layer.bn_a.state)
            states.append(layer.bn_b.state)
    return states


def _sync_part(dst, src_values: dict[str, np.ndarray]) -> None:
    dst.params.load_values(src_values)


def _sync_buffers(dst_part, src_states: list[T.BatchNormState]) -> None:
    for dst, src in zip(_bn_states(dst_part), src_states):
        dst.running_mean[:] = src.running_mean
        dst.running_var[:] = src.running_var


@dataclass
class BaselineResult:
    spec: BaselineSpec
    global_model: CsiModel
    replicas: list[CsiModel]
    ledger: CommLedger
    metrics: list[MetricsRow]


def _replica_loss_and_grads(model: CsiModel, batch: np.ndarray, bn_train: bool) -> float:
    for part in _parts(model).values():
        part.params.zero_grad()
    x = Tensor(batch)
    y = model.forward(x, train=bn_train)
    loss = M.nmse_loss(y, x)
    T.backward(loss)
    return loss.item()


def _eval_model(spec: BaselineSpec, global_model: CsiModel, replica: CsiModel,
                test_data: np.ndarray) -> float:
    encoder = replica.encoder if spec.personalized else global_model.encoder
    return M.reconstruct_nmse(encoder, global_model.tail, global_model.head, test_data)


def train_baseline(spec: BaselineSpec, fleet: FleetConfig, dims: CsiDims, adam: AdamConfig,
                   train_shards: Sequence[np.ndarray],
                   test_shards: Optional[Sequence[np.ndarray]] = None,
                   *, bn_train: bool = True, eval_every: int = 50,
                   model_seed: Optional[int] = None) -> BaselineResult:
    """Round-based federated training with exact parameter-exchange accounting."""
    n = fleet.n_ues
    if len(train_shards) != n:
        raise ProtocolError(f"got {len(train_shards)} train shards for {n} UEs")
    if test_shards is not None and len(test_shards) != n:
        raise ProtocolError(f"got {len(test_shards)} test shards for {n} UEs")

    model_seed = fleet.seed if model_seed is None else model_seed
    global_model = M.build_model(dims, fleet.boundary, model_seed)
    replicas = [M.build_model(dims, fleet.boundary, model_seed) for _ in range(n)]
    local_states = [
        {part: adam_init(obj.params, adam) for part, obj in _parts(rep).items()}
        for rep in replicas
    ]
    server_states = {part: adam_init(_parts(global_model)[part].params, adam)
                     for part in spec.shared_parts}

    d_shared = shared_subset_size(spec, global_model.encoder.params.count,
                                  global_model.tail.params.count,
                                  global_model.head.params.count)
    ledger = CommLedger(n)
    sampler = MinibatchSampler(fleet.samples_per_ue, fleet.batch_size, fleet.seed)

    can_eval = test_shards is not None

    def evaluate() -> tuple[float, list[float]]:
        per_ue = []
        weighted = 0.0
        total = 0
        for ue_id in range(n):
            nmse = _eval_model(spec, global_model, replicas[ue_id], test_shards[ue_id])
            per_ue.append(nmse)
            weighted += nmse * test_shards[ue_id].shape[0]
            total += test_shards[ue_id].shape[0]
        return weighted / total, per_ue

    metrics: list[MetricsRow] = []
    if can_eval:
        pooled, per_ue = evaluate()
        metrics.append(MetricsRow(0, 0, 0.0, None, pooled, per_ue))
    else:
        metrics.append(MetricsRow(0, 0, 0.0))

    for k in range(1, fleet.iterations + 1):
        try:
            global_values = {part: _parts(global_model)[part].params.values_copy()
                             for part in spec.shared_parts}
            global_buffers = {part: [s.copy() for s in _bn_states(_parts(global_model)[part])]
                              for part in spec.shared_parts}
            # broadcast
            for ue_id in range(n):
                for part in spec.shared_parts:
                    _sync_part(_parts(replicas[ue_id])[part], global_values[part])
                    _sync_buffers(_parts(replicas[ue_id])[part], global_buffers[part])
                ledger.add_downlink(ue_id, d_shared)

            # local work; all UEs draw the same index sequence into their own shards
            round_batches = [sampler.next() for _ in range(spec.local_steps)]
            losses = []
            grad_uploads: list[dict[str, dict[str, np.ndarray]]] = []
            for ue_id in range(n):
                rep = replicas[ue_id]
                loss = 0.0
                for idx in round_batches:
                    loss = _replica_loss_and_grads(rep, train_shards[ue_id][idx], bn_train)
                    part_grads = {part: _parts(rep)[part].params.grads()
                                  for part in _parts(rep)}
                    if spec.family == "fedprox" and spec.mu > 0:
                        for part in spec.shared_parts:
                            pen = fedprox_penalty_grad(_parts(rep)[part].params,
                                                       global_values[part], spec.mu)
                            for name, g in pen.items():
                                part_grads[part][name] = part_grads[part][name] + g
                    if spec.family == "fedgrad":
                        # personal parts advance locally; shared gradients are uploaded
                        for part in _parts(rep):
                            if part not in spec.shared_parts:
                                adam_step(_parts(rep)[part].params, part_grads[part],
                                          local_states[ue_id][part], adam)
                        grad_uploads.append({part: part_grads[part] for part in spec.shared_parts})
                    else:
                        for part in _parts(rep):
                            adam_step(_parts(rep)[part].params, part_grads[part],
                                      local_states[ue_id][part], adam)
                losses.append(loss)
                ledger.add_uplink(ue_id, d_shared)

            # aggregation
            if spec.family == "fedgrad":
                for part in spec.shared_parts:
                    mean_grads = {}
                    for name in global_values[part]:
                        stack = [grad_uploads[u][part][name] for u in range(n)]
                        mean_grads[name] = np.mean(stack, axis=0, dtype=np.float64).astype(stack[0].dtype)
                    adam_step(_parts(global_model)[part].params, mean_grads,
                              server_states[part], adam)
                for part in spec.shared_parts:
                    _aggregate_buffers(global_model, replicas, part)
            else:
                for part in spec.shared_parts:
                    stacked = {}
                    for name in global_values[part]:
                        uploads = [_parts(replicas[u])[part].params.tensors[name].data
                                   for u in range(n)]
                        stacked[name] = np.mean(uploads, axis=0, dtype=np.float64).astype(uploads[0].dtype)
                    _parts(global_model)[part].params.load_values(stacked)
                    _aggregate_buffers(global_model, replicas, part)
        except BaselineError:
            raise
        except Exception as exc:
            raise ProtocolError(f"round {k}: {exc}") from exc

        ledger.log_iteration(k)
        train_nmse = float(np.mean(losses))
        if can_eval and (k % eval_every == 0 or k == fleet.iterations):
            pooled, per_ue = evaluate()
            metrics.append(MetricsRow(k, ledger.total, float(k), train_nmse, pooled, per_ue))
        else:
            metrics.append(MetricsRow(k, ledger.total, float(k), train_nmse))

    return BaselineResult(spec, global_model, replicas, ledger, metrics)


def _aggregate_buffers(global_model: CsiModel, replicas: Sequence[CsiModel], part: str) -> None:
    """Average batchnorm running stats alongside the shared parameters.

    Buffers are synchronization metadata, not counted in the ledger (the
    exchanged-parameter metric counts the d_shared trainables only).
    """
    dst_states = _bn_states(_parts(global_model)[part])
    rep_states = [_bn_states(_parts(rep)[part]) for rep in replicas]
    for i, dst in enumerate(dst_states):
        dst.running_mean[:] = np.mean([rs[i].running_mean for rs in rep_states],
                                      axis=0, dtype=np.float64).astype(dst.running_mean.dtype)
        dst.running_var[:] = np.mean([rs[i].running_var for rs in rep_states],
                                     axis=0, dtype=np.float64).astype(dst.running_var.dtype)
