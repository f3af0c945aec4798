"""Shared fixtures and independent oracles used across the test suite."""

import numpy as np
import pytest

from csilocal import model as M
from csilocal import tensor as T
from csilocal.optim import AdamConfig, adam_init, adam_step
from csilocal.protocol import MinibatchSampler


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_dims(n=4):
    return M.CsiDims(n, n)


def build_f64_model(n=4, c=8, seed=0):
    return M.build_model(M.CsiDims(n, n), M.BoundaryDims(c, c), seed, dtype=np.float64)


def zero_biases(*parts):
    """Zero every bias and batchnorm shift so zero inputs stay zero."""
    for part in parts:
        for name, t in part.params.items():
            if name.endswith(".b") or name.endswith(".beta"):
                t.data[...] = 0.0


def rel_err(a, b, floor=1e-12):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), floor)


def centralized_train(model: M.CsiModel, shard: np.ndarray, batch_size: int,
                      iterations: int, adam: AdamConfig, seed: int,
                      bn_train: bool = False) -> None:
    """Plain single-machine Adam training of the composed model, used as the
    oracle for the split protocol and the gradient-placement baselines."""
    parts = {p: getattr(model, p) for p in ("encoder", "tail", "head")}
    states = {p: adam_init(obj.params, adam) for p, obj in parts.items()}
    sampler = MinibatchSampler(shard.shape[0], batch_size, seed)
    for _ in range(iterations):
        idx = sampler.next()
        for obj in parts.values():
            obj.params.zero_grad()
        x = T.Tensor(shard[idx])
        loss = M.nmse_loss(model.forward(x, train=bn_train), x)
        T.backward(loss)
        for p, obj in parts.items():
            adam_step(obj.params, obj.params.grads(), states[p], adam)


def assert_schedule_executable(schedule):
    """Independent dependency checker: replay the slots time step by time
    step and verify every input is already available."""
    P, Q = schedule.stages, schedule.micro_batches
    by_time = {}
    for slot in schedule.slots:
        by_time.setdefault(slot.time, []).append(slot)
    done = set()
    last_stage_forwards = 0
    backward_seen = False
    for t in sorted(by_time):
        stages_now = [s.stage for s in by_time[t]]
        assert len(stages_now) == len(set(stages_now)), f"stage double-booked at t={t}"
        for slot in by_time[t]:
            key = (slot.direction, slot.micro_batch, slot.stage)
            assert key not in done, f"slot repeated: {key}"
            if slot.direction == "forward":
                if slot.stage > 0:
                    assert ("forward", slot.micro_batch, slot.stage - 1) in done, \
                        f"forward({slot.micro_batch},{slot.stage}) before its input exists"
                assert not backward_seen, "fill-drain violated"
            else:
                if slot.stage < P - 1:
                    assert ("backward", slot.micro_batch, slot.stage + 1) in done, \
                        f"backward({slot.micro_batch},{slot.stage}) before upstream grad exists"
                else:
                    assert ("forward", slot.micro_batch, slot.stage) in done
                if not backward_seen:
                    assert last_stage_forwards == Q, "backward before all last-stage forwards"
                backward_seen = True
        for slot in by_time[t]:
            done.add((slot.direction, slot.micro_batch, slot.stage))
            if slot.direction == "forward" and slot.stage == P - 1:
                last_stage_forwards += 1
    assert len(done) == 2 * P * Q
