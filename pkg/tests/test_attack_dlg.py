import numpy as np
import pytest

from hefl.attack.dlg import AttackTarget, dlg_attack, infer_gradient, infer_label, matching_objective, victim_update
from hefl.attack.sweep import (
    RoundArtifact,
    RunArtifacts,
    best_reference,
    random_baseline,
    score_attack_sweep,
    select_victims,
    uplink_learning_rate,
)
from hefl.data import ClientDataset, make_toy_dataset, split_authentic_synthetic
from hefl.errors import ArtifactError, AttackError
from hefl.nncore import ModelParams, backward, forward, init_params, mlp_spec, train_local


@pytest.fixture
def linear():
    spec = mlp_spec((1, 4, 4), 3, hidden=())
    return spec, init_params(spec, seed=11).flat


@pytest.fixture
def victim(rng):
    return rng.uniform(0.0, 1.0, size=(1, 4, 4)), 2


def _target(spec, previous, image, label, lr=0.1, mask_bits=None, is_authentic=True):
    observed = victim_update(spec, previous, image, label, lr)
    return AttackTarget.from_round(spec, previous, observed, mask_bits, is_authentic, lr)


def test_inferred_gradient_is_the_true_gradient(linear, victim):
    spec, previous = linear
    image, label = victim
    target = _target(spec, previous, image, label)
    params = ModelParams(flat=previous, layout=spec.param_layout())
    _, cache = forward(spec, params, image[None])
    _, grad = backward(spec, params, cache, np.array([label]))
    np.testing.assert_allclose(infer_gradient(target).flat, grad.flat, atol=1e-9)


def test_masked_positions_are_not_observable(linear, victim):
    spec, previous = linear
    bits = np.zeros(spec.param_count, dtype=bool)
    bits[:10] = True
    authentic = _target(spec, previous, *victim, mask_bits=bits)
    synthetic = _target(spec, previous, *victim, mask_bits=bits, is_authentic=False)
    assert not authentic.observable[:10].any() and authentic.observable[10:].all()
    assert synthetic.observable.all()
    assert np.all(infer_gradient(authentic).flat[:10] == 0.0)


def test_non_positive_learning_rate_is_rejected(linear, victim):
    spec, previous = linear
    target = _target(spec, previous, *victim)
    with pytest.raises(AttackError):
        infer_gradient(target.copy(update={"lr": 0.0}))


def test_fully_encrypted_reply_is_degenerate(linear, victim):
    spec, previous = linear
    target = _target(spec, previous, *victim, mask_bits=np.ones(spec.param_count, dtype=bool))
    result = dlg_attack(target, iterations=50, seed=3)
    assert result.degenerate
    assert result.iterations == 0 and result.observed_coordinates == 0


def test_matching_gradient_agrees_with_finite_differences(rng):
    spec = mlp_spec((1, 4, 4), 3, hidden=(5,), activation="tanh")
    previous = init_params(spec, seed=2).flat
    target = _target(spec, previous, rng.uniform(0, 1, size=(1, 4, 4)), 1)
    g_hat = infer_gradient(target)
    x = rng.uniform(0, 1, size=(1, 1, 4, 4))
    z = rng.normal(size=(1, 3))
    _, grad_x, grad_z = matching_objective(target, g_hat, x, z)

    dx, dz = rng.normal(size=x.shape), rng.normal(size=z.shape)
    eps = 1e-5
    plus, _, _ = matching_objective(target, g_hat, x + eps * dx, z + eps * dz)
    minus, _, _ = matching_objective(target, g_hat, x - eps * dx, z - eps * dz)
    numeric = (plus - minus) / (2 * eps)
    analytic = np.sum(grad_x * dx) + np.sum(grad_z * dz)
    assert analytic == pytest.approx(numeric, rel=1e-3)


def _cosine(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@pytest.mark.parametrize("optimizer", ["lbfgs", "adam"])
def test_attack_recovers_image_from_linear_model(linear, victim, optimizer):
    spec, previous = linear
    image, label = victim
    target = _target(spec, previous, image, label)
    g_hat = infer_gradient(target)

    init = np.random.default_rng(4).uniform(0.0, 1.0, size=(1, *spec.input_shape))
    start_loss, _, _ = matching_objective(target, g_hat, init, np.random.default_rng(4).normal(size=(1, 3)))
    result = dlg_attack(target, iterations=500, step=0.05, seed=4, optimizer=optimizer)

    assert not result.diverged and not result.degenerate
    assert result.label_inferred and result.predicted_label == label
    assert result.matching_loss < 0.01 * start_loss
    assert _cosine(result.image, image) > 0.99
    assert result.image.min() >= 0.0 and result.image.max() <= 1.0


def test_label_is_read_off_the_output_bias(linear, victim):
    spec, previous = linear
    image, label = victim
    assert infer_label(_target(spec, previous, image, label)) == label

    bits = np.zeros(spec.param_count, dtype=bool)
    bits[-1] = True
    hidden = _target(spec, previous, image, label, mask_bits=bits)
    assert infer_label(hidden) is None
    result = dlg_attack(hidden, iterations=5, seed=1)
    assert not result.label_inferred


def test_unknown_optimizer_is_rejected(linear, victim):
    spec, previous = linear
    with pytest.raises(AttackError):
        dlg_attack(_target(spec, previous, *victim), iterations=1, optimizer="sgd")


@pytest.mark.parametrize("optimizer", ["lbfgs", "adam"])
def test_zero_iterations_return_the_initialisation(linear, victim, optimizer):
    spec, previous = linear
    result = dlg_attack(_target(spec, previous, *victim), iterations=0, seed=6, optimizer=optimizer)
    init = np.random.default_rng(6).uniform(0.0, 1.0, size=(1, *spec.input_shape))
    assert result.iterations == 0
    np.testing.assert_array_equal(result.image, init[0])


def test_attack_is_deterministic_per_seed(linear, victim):
    spec, previous = linear
    target = _target(spec, previous, *victim)
    a = dlg_attack(target, iterations=20, seed=9)
    b = dlg_attack(target, iterations=20, seed=9)
    c = dlg_attack(target, iterations=20, seed=10)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.matching_loss == b.matching_loss
    assert not np.array_equal(a.image, c.image)


@pytest.fixture
def artifacts():
    pool = make_toy_dataset(2, 6, 16, seed=1, noise=0.2)
    authentic, synthetic = split_authentic_synthetic(pool, seed=2)
    spec = mlp_spec((1, 16, 16), 2, hidden=())
    previous = init_params(spec, seed=3).flat
    bits = np.zeros(spec.param_count, dtype=bool)
    bits[::5] = True
    rounds = {
        0: RoundArtifact(round=0, is_authentic=True, previous=previous, mask_bits=bits, lr=0.1),
        1: RoundArtifact(round=1, is_authentic=False, previous=previous, mask_bits=bits, lr=0.1),
    }
    return RunArtifacts(spec=spec, authentic_pool=authentic, synthetic_pool=synthetic, rounds=rounds)


def test_victims_are_balanced_per_class(artifacts):
    pool = artifacts.authentic_pool
    victims = select_victims(pool, 2, seed=5)
    assert victims == sorted(victims)
    labels = pool.labels[victims]
    assert sorted(np.bincount(labels).tolist()) == [2, 2]
    assert victims == select_victims(pool, 2, seed=5)


def test_best_reference_finds_itself(artifacts):
    pool = artifacts.authentic_pool
    assert best_reference(pool.images[3], pool) == 3


def test_sweep_scores_both_kinds_of_round(artifacts):
    kwargs = dict(images_per_class=1, iterations=5, seed=7)
    table = score_attack_sweep(artifacts, [0, 1], **kwargs)
    frame = table.to_frame()
    assert len(frame) == 4
    assert frame.loc[frame["round"] == 0, "reference_id"].tolist() == frame.loc[frame["round"] == 0, "image_id"].tolist()
    authentic_ids = set(artifacts.authentic_pool.ids.tolist())
    assert set(frame.loc[frame["round"] == 1, "reference_id"]) <= authentic_ids

    summary = table.summary()
    assert summary["aggregate"].tolist() == ["max", "mean"]
    round0 = frame[frame["round"] == 0]
    assert summary.loc[0, "msssim"] == pytest.approx(round0["msssim"].max())

    again = score_attack_sweep(artifacts, [0, 1], **kwargs).to_frame()
    assert frame.equals(again)


def test_sweep_over_no_rounds_is_empty(artifacts):
    table = score_attack_sweep(artifacts, [])
    assert table.rows == []
    assert table.summary().empty


def test_sweep_rejects_unsaved_rounds(artifacts):
    with pytest.raises(ArtifactError):
        score_attack_sweep(artifacts, [0, 7], images_per_class=1, iterations=1)


def test_random_baseline_scores_are_bounded(artifacts):
    scores = random_baseline(artifacts, count=2, seed=1)
    assert set(scores) == {"uqi", "msssim", "vif"}
    assert 0.0 <= scores["msssim"] <= 1.0


def test_uplink_step_counts_every_local_batch():
    assert uplink_learning_rate(0.05, 10, 4, 2) == pytest.approx(0.3)
    assert uplink_learning_rate(0.1, 8, 8, 1) == pytest.approx(0.1)


@pytest.fixture
def uplink_artifacts(artifacts):
    spec, previous = artifacts.spec, artifacts.rounds[0].previous
    clients = [
        ClientDataset(client_id=0, authentic=artifacts.authentic_pool.subset(np.arange(3)), synthetic=artifacts.synthetic_pool.subset(np.arange(3))),
        ClientDataset(client_id=1, authentic=artifacts.authentic_pool.subset(np.arange(3, 6)), synthetic=artifacts.synthetic_pool.subset(np.arange(3, 6))),
    ]
    params = ModelParams(flat=previous, layout=spec.param_layout())
    rounds = {}
    for t, snapshot in artifacts.rounds.items():
        uplinks, uplink_lr = {}, {}
        for client in clients:
            data = client.authentic if snapshot.is_authentic else client.synthetic
            reply = train_local(spec, params, data, epochs=1, batch_size=4, lr=0.1, seed=t).flat
            if snapshot.is_authentic:
                reply = np.where(snapshot.mask_bits, 0.0, reply)
            uplinks[client.client_id] = reply
            uplink_lr[client.client_id] = uplink_learning_rate(0.1, len(data), 4, 1)
        rounds[t] = snapshot.copy(update={"uplinks": uplinks, "uplink_lr": uplink_lr})
    return artifacts.copy(update={"rounds": rounds, "clients": clients})


def test_sweep_attacks_saved_client_replies(uplink_artifacts):
    table = score_attack_sweep(uplink_artifacts, [0, 1], iterations=5, seed=7, source="uplink")
    frame = table.to_frame()
    assert len(frame) == 4
    assert frame.loc[frame["round"] == 0, "client_id"].tolist() == [0, 1]
    for client in uplink_artifacts.clients:
        own = frame[(frame["round"] == 0) & (frame["client_id"] == client.client_id)]
        assert set(own["reference_id"]) <= set(client.authentic.ids.tolist())
    authentic_ids = set(uplink_artifacts.authentic_pool.ids.tolist())
    assert set(frame.loc[frame["round"] == 1, "reference_id"]) <= authentic_ids
    assert table.summary()["aggregate"].tolist() == ["max", "mean"]
    for row in table.rows:
        assert table.recovery(row).shape == (1, 16, 16)


def test_uplink_sweep_needs_saved_replies(artifacts):
    with pytest.raises(ArtifactError):
        score_attack_sweep(artifacts, [0], iterations=1, source="uplink")
    with pytest.raises(AttackError):
        score_attack_sweep(artifacts, [0], iterations=1, source="mirror")
