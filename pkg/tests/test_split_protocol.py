"""Split protocol: smashed-data exchange, gradient routing, accounting."""

import numpy as np
import pytest

from csilocal import model as M
from csilocal import protocol as PR
from csilocal import tensor as T
from csilocal.model import BoundaryDims, CsiDims
from csilocal.optim import AdamConfig
from csilocal.pipeline import PipelineConfig
from csilocal.protocol import (CommLedger, FleetConfig, SmashedBatch,
                               KIND_ENCODER_ACTIVATION, KIND_TAIL_OUTPUT,
                               ProtocolError, audit_messages, bts_accumulate,
                               bts_tail_backward, bts_tail_forward_disseminate,
                               csilocal_comm_closed_form, train_csilocal,
                               ue_forward_upload, ue_loss_and_backward)
from csilocal.tensor import Tensor

from conftest import build_f64_model, centralized_train, rel_err

DIMS = CsiDims(4, 4)
BD = BoundaryDims(8, 8)


def make_ue(rng, ue_id=0, m_samples=16, dtype=np.float64, seed=0):
    model = M.build_model(DIMS, BD, seed, dtype=dtype)
    data = rng.uniform(0.05, 1.0, (m_samples, 2, 4, 4)).astype(dtype)
    return PR.UserEquipment(ue_id, model.encoder, model.head, data, data[:4].copy(),
                            AdamConfig()), model


def make_bts(seed=0, dtype=np.float64, total_rows=8, pipeline=None):
    model = M.build_model(DIMS, BD, seed, dtype=dtype)
    return PR.BaseStation(model.tail, AdamConfig(),
                          pipeline or PipelineConfig(stages=2, micro_batches=2),
                          total_rows), model


class TestSmashedBatch:
    def test_paper_scale_count(self):
        payload = Tensor(np.zeros((800, 256), dtype=np.float32))
        msg = SmashedBatch(0, KIND_ENCODER_ACTIVATION, payload)
        assert msg.scalar_count == 204800

    def test_minimal_shape(self):
        msg = SmashedBatch(1, KIND_TAIL_OUTPUT, Tensor(np.zeros((1, 4), dtype=np.float32)))
        assert msg.payload.shape == (1, 4) and msg.scalar_count == 4

    def test_count_must_match_payload(self):
        with pytest.raises(ProtocolError):
            SmashedBatch(0, KIND_ENCODER_ACTIVATION, Tensor(np.zeros((2, 3))), scalar_count=5)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ProtocolError):
            SmashedBatch(0, "raw_csi", Tensor(np.zeros((2, 3))))

    def test_raw_shaped_payload_rejected(self):
        with pytest.raises(ProtocolError):
            SmashedBatch(0, KIND_ENCODER_ACTIVATION, Tensor(np.zeros((2, 2, 4, 4))))


class TestLedger:
    def test_total_is_sum_of_directions(self):
        led = CommLedger(2)
        led.add_uplink(0, 10)
        led.add_downlink(1, 5)
        led.add_uplink(1, 3)
        assert led.total == 18
        assert led.uplink == [10, 3] and led.downlink == [0, 5]

    def test_counters_never_decrease(self):
        led = CommLedger(1)
        with pytest.raises(ProtocolError):
            led.add_uplink(0, -1)


class TestFleetConfig:
    def test_validation(self):
        with pytest.raises(ProtocolError):
            FleetConfig(0, 10, 5, 1, BD)
        with pytest.raises(ProtocolError):
            FleetConfig(1, 10, 11, 1, BD)
        with pytest.raises(ProtocolError):
            FleetConfig(1, 10, 5, 0, BD)

    def test_closed_form(self):
        fleet = FleetConfig(10, 13000, 800, 1, BoundaryDims(256, 256))
        assert csilocal_comm_closed_form(fleet) == 8_192_000
        assert csilocal_comm_closed_form(fleet, iterations=3) == 3 * 8_192_000
        assert csilocal_comm_closed_form(fleet, boundary=(0, 0)) == 0


class TestForwardUpload:
    def test_payload_matches_standalone_encoder(self, rng):
        ue, model = make_ue(rng)
        led = CommLedger(1)
        idx = np.array([0, 3, 5])
        msg = ue_forward_upload(ue, idx, led, train=False)
        ref = model.encoder.forward(Tensor(ue.train_data[idx]), train=False)
        assert np.array_equal(msg.payload.data, ref.data)
        assert led.uplink[0] == 3 * 8

    def test_empty_batch_rejected(self, rng):
        ue, _ = make_ue(rng)
        with pytest.raises(ProtocolError, match="empty"):
            ue_forward_upload(ue, np.array([], dtype=int), CommLedger(1))

    def test_out_of_shard_indices_rejected(self, rng):
        ue, _ = make_ue(rng)
        with pytest.raises(ProtocolError):
            ue_forward_upload(ue, np.array([99]), CommLedger(1))


class TestAccumulate:
    def test_rows_follow_ascending_ue_order(self, rng):
        batches = []
        for ue_id in (2, 0, 1):
            payload = Tensor(np.full((2, 4), float(ue_id), dtype=np.float32))
            batches.append(SmashedBatch(ue_id, KIND_ENCODER_ACTIVATION, payload))
        acc = bts_accumulate(batches, 3)
        assert np.all(acc.data[0:2] == 0) and np.all(acc.data[2:4] == 1) and np.all(acc.data[4:6] == 2)

    def test_single_ue_identity(self, rng):
        payload = rng.standard_normal((3, 8)).astype(np.float32)
        acc = bts_accumulate([SmashedBatch(0, KIND_ENCODER_ACTIVATION, Tensor(payload))], 1)
        assert np.array_equal(acc.data, payload)

    def test_round_trip_recovers_per_ue_rows(self, rng):
        payloads = [rng.standard_normal((2, 8)).astype(np.float32) for _ in range(3)]
        acc = bts_accumulate([SmashedBatch(i, KIND_ENCODER_ACTIVATION, Tensor(p))
                              for i, p in enumerate(payloads)], 3)
        for i, p in enumerate(payloads):
            assert np.array_equal(acc.data[2 * i:2 * i + 2], p)

    def test_missing_ue_named(self, rng):
        msg = SmashedBatch(0, KIND_ENCODER_ACTIVATION, Tensor(np.zeros((2, 8), dtype=np.float32)))
        with pytest.raises(ProtocolError, match="UE 1"):
            bts_accumulate([msg], 2)


class TestTailForwardBackward:
    def test_pipeline_on_off_equivalence(self, rng):
        z = rng.standard_normal((8, 8))
        outs = {}
        for enabled in (True, False):
            bts, _ = make_bts(pipeline=PipelineConfig(stages=2, micro_batches=2, enabled=enabled))
            led = CommLedger(2)
            acc = Tensor(z, requires_grad=True, dtype=np.float64)
            msgs, _ = bts_tail_forward_disseminate(bts, acc, 2, led, train=False)
            outs[enabled] = np.concatenate([m.payload.data for m in msgs])
            assert led.downlink == [4 * 8, 4 * 8]
        assert rel_err(outs[True], outs[False]) < 1e-6

    def test_zero_tail_zero_input_gives_zero_payload(self):
        bts, model = make_bts(total_rows=4, pipeline=PipelineConfig(enabled=False))
        for name, t in model.tail.params.items():
            t.data[...] = 0.0
        acc = Tensor(np.zeros((4, 8)), requires_grad=True, dtype=np.float64)
        msgs, _ = bts_tail_forward_disseminate(bts, acc, 1, CommLedger(1), train=False)
        assert np.all(msgs[0].payload.data == 0)

    def test_backward_zero_boundary_grads_give_zero_tail_grads(self, rng):
        bts, model = make_bts(total_rows=4)
        acc = Tensor(rng.standard_normal((4, 8)), requires_grad=True, dtype=np.float64)
        _, ctx = bts_tail_forward_disseminate(bts, acc, 2, CommLedger(2), train=False)
        zero = [SmashedBatch(i, PR.KIND_HEAD_BOUNDARY_GRAD,
                             Tensor(np.zeros((2, 8)), dtype=np.float64)) for i in range(2)]
        msgs = bts_tail_backward(bts, zero, ctx, 2, CommLedger(2))
        for _, t in model.tail.params.items():
            assert np.all(t.grad == 0)
        assert all(np.all(m.payload.data == 0) for m in msgs)

    def test_missing_boundary_grad_named(self, rng):
        bts, _ = make_bts(total_rows=4)
        acc = Tensor(rng.standard_normal((4, 8)), requires_grad=True, dtype=np.float64)
        _, ctx = bts_tail_forward_disseminate(bts, acc, 2, CommLedger(2), train=False)
        one = [SmashedBatch(0, PR.KIND_HEAD_BOUNDARY_GRAD, Tensor(np.zeros((2, 8)), dtype=np.float64))]
        with pytest.raises(ProtocolError, match="UE 1"):
            bts_tail_backward(bts, one, ctx, 2, CommLedger(2))


class TestLossAndBackward:
    def test_perfect_reconstruction_zero_loss_and_grads(self, rng):
        ue, model = make_ue(rng)
        u = rng.standard_normal((4, 8))
        with T.no_grad():
            targets = model.head.forward(Tensor(u, dtype=np.float64)).data
        ue.train_data = targets
        msg = SmashedBatch(0, KIND_TAIL_OUTPUT, Tensor(u, dtype=np.float64))
        loss, gmsg = ue_loss_and_backward(ue, msg, np.arange(4), CommLedger(1))
        assert loss == 0.0
        assert np.all(gmsg.payload.data == 0)
        for _, t in ue.head.params.items():
            assert np.all(t.grad == 0)

    def test_boundary_gradient_matches_finite_differences(self, rng):
        ue, model = make_ue(rng)
        u = rng.standard_normal((3, 8))
        idx = np.array([1, 2, 3])
        msg = SmashedBatch(0, KIND_TAIL_OUTPUT, Tensor(u, dtype=np.float64))
        _, gmsg = ue_loss_and_backward(ue, msg, idx, CommLedger(1))
        targets = Tensor(ue.train_data[idx])

        def f(t):
            return M.nmse_loss(model.head.forward(t), targets).item()

        fd = T.finite_diff_grad(f, Tensor(u.copy(), dtype=np.float64), 1e-5)
        assert rel_err(gmsg.payload.data, fd.data) < 1e-4

    def test_head_gradient_equals_centralized_composition(self, rng):
        # split-side head gradients == gradients from the fully composed graph
        split_model = build_f64_model(seed=9)
        central = build_f64_model(seed=9)
        x = rng.uniform(0.05, 1.0, (4, 2, 4, 4))

        xt = Tensor(x, dtype=np.float64)
        loss_c = M.nmse_loss(central.forward(xt, train=False), xt)
        T.backward(loss_c)

        ue = PR.UserEquipment(0, split_model.encoder, split_model.head, x, None, AdamConfig())
        led = CommLedger(1)
        up = ue_forward_upload(ue, np.arange(4), led, train=False)
        acc = bts_accumulate([up], 1)
        bts = PR.BaseStation(split_model.tail, AdamConfig(), PipelineConfig(enabled=False), 4)
        outs, ctx = bts_tail_forward_disseminate(bts, acc, 1, led, train=False)
        loss, gmsg = ue_loss_and_backward(ue, outs[0], np.arange(4), led)
        assert abs(loss - loss_c.item()) < 1e-12
        for name, t in split_model.head.params.items():
            assert np.array_equal(t.grad, central.head.params.tensors[name].grad), name

        enc_msgs = bts_tail_backward(bts, [gmsg], ctx, 1, led)
        for name, t in split_model.tail.params.items():
            assert rel_err(t.grad, central.tail.params.tensors[name].grad) < 1e-6, name
        PR.ue_apply_boundary_grad(ue, enc_msgs[0])
        for name, t in split_model.encoder.params.items():
            assert rel_err(t.grad, central.encoder.params.tensors[name].grad) < 1e-6, name

    def test_two_ues_identical_data_double_the_tail_gradient(self, rng):
        x = rng.uniform(0.05, 1.0, (4, 2, 4, 4))

        def tail_grads(n_ues):
            model = build_f64_model(seed=11)
            ues = [PR.UserEquipment(i, M.build_model(DIMS, BD, 11, np.float64).encoder,
                                    M.build_model(DIMS, BD, 11, np.float64).head,
                                    x, None, AdamConfig()) for i in range(n_ues)]
            led = CommLedger(n_ues)
            ups = [ue_forward_upload(u, np.arange(4), led, train=False) for u in ues]
            acc = bts_accumulate(ups, n_ues)
            bts = PR.BaseStation(model.tail, AdamConfig(), PipelineConfig(enabled=False),
                                 4 * n_ues)
            outs, ctx = bts_tail_forward_disseminate(bts, acc, n_ues, led, train=False)
            gmsgs = [ue_loss_and_backward(u, o, np.arange(4), led)[1]
                     for u, o in zip(ues, outs)]
            bts_tail_backward(bts, gmsgs, ctx, n_ues, led)
            return {n: t.grad.copy() for n, t in model.tail.params.items()}

        g1 = tail_grads(1)
        g2 = tail_grads(2)
        for name in g1:
            assert rel_err(g2[name], 2.0 * g1[name]) < 1e-6, name

    def test_average_switch_rescales_tail_gradient_only(self, rng):
        x = rng.uniform(0.05, 1.0, (4, 2, 4, 4))

        def run(average):
            model = build_f64_model(seed=13)
            ues = [PR.UserEquipment(i, M.build_model(DIMS, BD, 13, np.float64).encoder,
                                    M.build_model(DIMS, BD, 13, np.float64).head,
                                    x, None, AdamConfig()) for i in range(2)]
            led = CommLedger(2)
            ups = [ue_forward_upload(u, np.arange(4), led, train=False) for u in ues]
            acc = bts_accumulate(ups, 2)
            bts = PR.BaseStation(model.tail, AdamConfig(), PipelineConfig(enabled=False), 8)
            outs, ctx = bts_tail_forward_disseminate(bts, acc, 2, led, train=False)
            gmsgs = [ue_loss_and_backward(u, o, np.arange(4), led)[1]
                     for u, o in zip(ues, outs)]
            enc_msgs = bts_tail_backward(bts, gmsgs, ctx, 2, led, average_over_ues=average)
            return ({n: t.grad.copy() for n, t in model.tail.params.items()},
                    enc_msgs[0].payload.data.copy())

        summed, enc_a = run(False)
        averaged, enc_b = run(True)
        for name in summed:
            assert rel_err(averaged[name], summed[name] / 2.0) < 1e-12
        assert np.array_equal(enc_a, enc_b)


class TestTrainLoop:
    def _shards(self, rng, n, m=16):
        return [rng.uniform(0.05, 1.0, (m, 2, 4, 4)).astype(np.float32) for _ in range(n)]

    def test_ledger_matches_closed_form(self, rng):
        fleet = FleetConfig(3, 16, 4, 5, BD, seed=2)
        res = train_csilocal(fleet, DIMS, AdamConfig(), self._shards(rng, 3),
                             self._shards(rng, 3, 8), PipelineConfig())
        assert res.ledger.total == csilocal_comm_closed_form(fleet)
        assert [it for it, _ in res.ledger.iteration_log] == list(range(1, 6))

    def test_volume_independent_of_part_sizes(self, rng):
        # same (N, B, c1, c2, K), different CSI dims (hence different d1, d2, d3)
        for n in (4, 6):
            dims = CsiDims(n, n)
            fleet = FleetConfig(2, 8, 4, 3, BD, seed=1)
            shards = [rng.uniform(0.05, 1.0, (8, 2, n, n)).astype(np.float32) for _ in range(2)]
            res = train_csilocal(fleet, dims, AdamConfig(), shards, None, PipelineConfig())
            assert res.ledger.total == csilocal_comm_closed_form(fleet)

    def test_deterministic_given_seed(self, rng):
        fleet = FleetConfig(2, 16, 4, 4, BD, seed=9)
        shards = self._shards(rng, 2)
        tests = self._shards(rng, 2, 8)
        a = train_csilocal(fleet, DIMS, AdamConfig(), [s.copy() for s in shards],
                           [s.copy() for s in tests], PipelineConfig())
        b = train_csilocal(fleet, DIMS, AdamConfig(), [s.copy() for s in shards],
                           [s.copy() for s in tests], PipelineConfig())
        for ra, rb in zip(a.metrics, b.metrics):
            assert (ra.iteration, ra.exchanged_scalars, ra.train_nmse, ra.test_nmse) == \
                   (rb.iteration, rb.exchanged_scalars, rb.train_nmse, rb.test_nmse)
        for ua, ub in zip(a.ues, b.ues):
            for name, t in ua.encoder.params.items():
                assert np.array_equal(t.data, ub.encoder.params.tensors[name].data)

    def test_message_kinds_exclude_raw_samples(self, rng):
        fleet = FleetConfig(2, 16, 4, 3, BD, seed=5)
        tap = []
        train_csilocal(fleet, DIMS, AdamConfig(), self._shards(rng, 2), None,
                       PipelineConfig(), message_tap=tap)
        counts = audit_messages(tap, DIMS.sample_shape)
        assert counts == {k: 6 for k in PR.MESSAGE_KINDS}

    def test_audit_rejects_raw_payload_shapes(self):
        bad = [PR.MessageRecord(1, 0, KIND_ENCODER_ACTIVATION, (4, 2, 4, 4))]
        with pytest.raises(ProtocolError):
            audit_messages(bad, DIMS.sample_shape)
        with pytest.raises(ProtocolError):
            audit_messages([PR.MessageRecord(1, 0, "raw_upload", (4, 8))], DIMS.sample_shape)

    def test_single_ue_matches_centralized_training(self, rng):
        shard = rng.uniform(0.05, 1.0, (16, 2, 4, 4)).astype(np.float32)
        fleet = FleetConfig(1, 16, 4, 20, BD, seed=21)
        res = train_csilocal(fleet, DIMS, AdamConfig(learning_rate=1e-3), [shard], None,
                             PipelineConfig(stages=2, micro_batches=2), bn_train=False)
        oracle = M.build_model(DIMS, BD, fleet.seed)
        centralized_train(oracle, shard, 4, 20, AdamConfig(learning_rate=1e-3),
                          fleet.seed, bn_train=False)
        for name, t in res.ues[0].encoder.params.items():
            assert rel_err(t.data, oracle.encoder.params.tensors[name].data) < 1e-5
        for name, t in res.bts.tail.params.items():
            assert rel_err(t.data, oracle.tail.params.tensors[name].data) < 1e-5
        for name, t in res.ues[0].head.params.items():
            assert rel_err(t.data, oracle.head.params.tensors[name].data) < 1e-5

    def test_error_reports_iteration(self, rng):
        shards = self._shards(rng, 2)
        shards[1][:] = 0.0  # zero-norm targets blow up in iteration 1
        fleet = FleetConfig(2, 16, 4, 2, BD, seed=3)
        with pytest.raises(ProtocolError, match="iteration 1"):
            train_csilocal(fleet, DIMS, AdamConfig(), shards, None, PipelineConfig())
