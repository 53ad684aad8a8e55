import math

import numpy as np
import pydantic
import pytest

from hefl.crypto import EncryptionMask, build_mask, decrypt_masked, encrypt_masked, plain_model
from hefl.errors import AggregationError, MaskMismatchError
from hefl.nncore import ModelParams, ParamSlot, init_params
from hefl.protocol import (
    ClientCosts,
    ClientState,
    LocalHyperparams,
    MessageTrace,
    RoundSchedule,
    ServerState,
    build_federation,
    client_round,
    is_authentic_round,
    measure_sensitivity,
    run_training,
    server_aggregate,
)


def _params(values) -> ModelParams:
    values = np.asarray(values, dtype=np.float64)
    return ModelParams(flat=values, layout=[ParamSlot(name="0.dense.weight", offset=0, length=len(values), shape=(len(values),))])


@pytest.mark.parametrize("rho_syn, rho_tot", [(0, 1), (1, 4), (1, 2)])
def test_authentic_round_count_follows_the_interleaving_ratio(rho_syn, rho_tot):
    schedule = RoundSchedule(rho_syn=rho_syn, rho_tot=rho_tot)
    for horizon in range(1, 121):
        authentic = sum(is_authentic_round(t, schedule) for t in range(horizon))
        assert authentic == math.ceil((1 - schedule.rho) * horizon - 1e-12)


def test_half_schedule_alternates_starting_authentic():
    schedule = RoundSchedule(rho_syn=1, rho_tot=2)
    assert [is_authentic_round(t, schedule) for t in range(4)] == [True, False, True, False]
    with pytest.raises(pydantic.ValidationError):
        RoundSchedule(rho_syn=2, rho_tot=2)
    with pytest.raises(ValueError):
        is_authentic_round(-1, schedule)


def test_plaintext_aggregation_is_fedavg(rng):
    vectors = [rng.normal(size=20) for _ in range(3)]
    weights = [0.5, 0.3, 0.2]
    models = [plain_model(_params(v)) for v in vectors]
    out = server_aggregate(models, weights, EncryptionMask.empty(20), is_auth=False).to_params()
    np.testing.assert_allclose(out.flat, 0.5 * vectors[0] + 0.3 * vectors[1] + 0.2 * vectors[2], rtol=0, atol=1e-12)

    single = server_aggregate(models[:1], [1.0], EncryptionMask.empty(20), is_auth=False).to_params()
    np.testing.assert_array_equal(single.flat, vectors[0])


def test_encrypted_aggregation_is_fedavg(small_key, rng):
    vectors = [rng.normal(size=100) for _ in range(3)]
    weights = rng.dirichlet(np.ones(3))
    weights = weights / weights.sum()
    mask = build_mask(0.2, 100, seed=0)
    models = [encrypt_masked(_params(v), mask, small_key, seed=i) for i, v in enumerate(vectors)]
    out = decrypt_masked(server_aggregate(models, list(weights), mask, is_auth=True), mask, small_key)
    np.testing.assert_allclose(out.flat, sum(w * v for w, v in zip(weights, vectors)), rtol=0, atol=1e-5)


def test_aggregation_rejects_inconsistent_rounds(small_key):
    mask = build_mask(0.5, 4, seed=0)
    enc = encrypt_masked(_params(np.ones(4)), mask, small_key, seed=0)
    plain = plain_model(_params(np.ones(4)))
    with pytest.raises(AggregationError):
        server_aggregate([], [], mask, is_auth=True)
    with pytest.raises(AggregationError):
        server_aggregate([plain, plain], [0.5, 0.6], mask, is_auth=False)
    with pytest.raises(AggregationError):
        server_aggregate([enc, plain], [0.5, 0.5], mask, is_auth=True)
    with pytest.raises(AggregationError):
        server_aggregate([plain], [1.0], mask, is_auth=True)
    with pytest.raises(MaskMismatchError):
        server_aggregate([enc], [1.0], build_mask(0.5, 4, seed=9), is_auth=True)


def test_aggregation_weights_must_sum_to_one_tightly():
    plain = plain_model(_params(np.ones(4)))
    mask = EncryptionMask.empty(4)
    with pytest.raises(AggregationError):
        server_aggregate([plain, plain], [0.5, 0.5 + 1e-10], mask, is_auth=False)
    weights = np.array([3.0, 4.0, 5.0]) / 12.0
    server_aggregate([plain] * 3, list(weights), mask, is_auth=False)


def test_server_waits_for_every_client():
    server = ServerState(mask=EncryptionMask.empty(4), num_clients=2)
    server.receive(0, plain_model(_params(np.ones(4))), 0.5)
    assert not server.ready()
    with pytest.raises(AggregationError):
        server.aggregate(is_authentic=False)
    server.receive(1, plain_model(_params(np.full(4, 3.0))), 0.5)
    assert server.ready()
    out = server.aggregate(is_authentic=False).to_params()
    np.testing.assert_allclose(out.flat, np.full(4, 2.0))
    assert server.round == 1
    assert not server.received


def test_message_trace_is_ordered_and_keeps_designated_rounds():
    trace = MessageTrace(retain_rounds=[1])
    trace.send(0, "down", 0, b"a")
    trace.send(1, "down", 0, b"b", is_authentic=False)
    trace.send(1, "up", 0, b"c", is_authentic=False)
    assert trace.receive("down", 0).payload == b"a"
    assert trace.receive("down", 0).payload == b"b"
    with pytest.raises(AggregationError):
        trace.receive("down", 0)
    assert list(trace.retained) == [1]
    assert trace.retained[1].broadcast == b"b"
    assert trace.retained[1].uplinks == {0: b"c"}
    assert not trace.retained[1].is_authentic


@pytest.fixture
def federation_client(tiny_config, small_key):
    config = tiny_config()
    federation = build_federation(config, seed=1)
    params = init_params(federation.spec, 0)
    mask = build_mask(0.2, len(params), seed=0)
    state = ClientState(
        client_id=0,
        data=federation.clients[0],
        spec=federation.spec,
        key=small_key,
        mask=mask,
        hyper=LocalHyperparams(lr=0.1, batch_size=4, epochs=1),
        seed=11,
    )
    return state, params


def test_client_round_follows_the_round_type(federation_client, small_key):
    state, params = federation_client

    costs = ClientCosts()
    reply = client_round(state, plain_model(params), is_auth=True, round_index=0, costs=costs)
    assert reply.is_encrypted and reply.mask.same_as(state.mask)
    assert (costs.enc_ops, costs.dec_ops) == (1, 0)
    assert costs.samples == len(state.data.authentic)
    assert costs.uplink_ciphertext_bytes == state.mask.popcount * small_key.slot_bytes

    costs = ClientCosts()
    reply = client_round(state, reply, is_auth=False, round_index=1, costs=costs)
    assert not reply.is_encrypted
    assert (costs.enc_ops, costs.dec_ops) == (0, 1)
    assert costs.samples == len(state.data.synthetic)
    assert costs.uplink_ciphertext_bytes == 0

    foreign = encrypt_masked(params, build_mask(0.2, len(params), seed=99), small_key, seed=0)
    with pytest.raises(MaskMismatchError):
        client_round(state, foreign, is_auth=True)


def test_client_round_is_deterministic(federation_client):
    state, params = federation_client
    a = client_round(state, plain_model(params), is_auth=False, round_index=3)
    b = client_round(state, plain_model(params), is_auth=False, round_index=3)
    np.testing.assert_array_equal(a.plain, b.plain)


def test_measure_sensitivity(federation_client):
    state, params = federation_client
    sensitivity = measure_sensitivity(state, params, batch_size=4)
    assert sensitivity.shape == (len(params),)
    assert np.all(sensitivity >= 0) and sensitivity.max() > 0


def test_run_training_ledger_counts(tiny_config):
    config = tiny_config(schedule={"rho_syn": 1, "rho_tot": 2}, stopping={"rounds": 6}, run={"trace_rounds": [2, 3]})
    result = run_training(config)
    n = config.federation.num_clients
    ledger = result.ledger.to_frame()

    assert [h.round for h in result.history] == list(range(6))
    assert ledger["is_authentic"].tolist() == [True, False] * 3
    assert ledger["enc_ops"].tolist() == [n, 0] * 3
    # Broadcasts following an authentic round arrive encrypted.
    assert ledger["dec_ops"].tolist() == [0, n, 0, n, 0, n]
    assert (ledger.loc[~ledger["is_authentic"], "uplink_ciphertext_bytes"] == 0).all()
    slot_bytes = ledger.loc[0, "uplink_ciphertext_bytes"] / (n * result.mask.popcount)
    assert slot_bytes == int(slot_bytes) and slot_bytes > 0
    assert ledger.loc[1, "broadcast_ciphertext_bytes"] == ledger.loc[0, "uplink_ciphertext_bytes"]
    assert sorted(result.traces) == [2, 3]
    assert result.traces[2].is_authentic and not result.traces[3].is_authentic
    assert sorted(result.traces[2].uplinks) == list(range(n))


def test_run_training_is_deterministic_across_worker_counts(tiny_config):
    serial = run_training(tiny_config(schedule={"rho_syn": 1, "rho_tot": 2}))
    threaded = run_training(tiny_config(schedule={"rho_syn": 1, "rho_tot": 2}, run={"workers": 3}))
    assert [h.dict() for h in serial.history] == [h.dict() for h in threaded.history]
    assert serial.ledger.ledger_frame().equals(threaded.ledger.ledger_frame())
    np.testing.assert_array_equal(serial.final_model.flat, threaded.final_model.flat)
    assert serial.key_fingerprint == threaded.key_fingerprint


def test_random_and_sensitivity_masks_have_the_same_ratio(tiny_config):
    sensitivity = run_training(tiny_config(stopping={"rounds": 1}))
    random = run_training(tiny_config(stopping={"rounds": 1}, crypto={"mask_strategy": "random"}))
    assert sensitivity.mask.popcount == random.mask.popcount
    assert not sensitivity.mask.same_as(random.mask)
