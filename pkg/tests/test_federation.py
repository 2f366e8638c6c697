"""
Tests for protofed.Federation module.

Aggregation arithmetic is checked against hand-computed values; the round
protocol against the equivalences it must satisfy (one client equals local
training, two epochs equal two one-epoch updates, thread count does not
change results).
"""

import csv
from dataclasses import replace

import numpy as np
import pytest

import protofed
from protofed.Federation import (METRICS_NAME, ALIGNMENT_NAME, CONFIG_NAME,
                                 CHECKPOINT_DIR, GLOBAL_CHECKPOINT,
                                 communicated_groups, global_from_params,
                                 make_client, initial_params)
from protofed.Model import PROTOTYPES, checkpoint_size, init_params
from protofed.Payload import serialize_payload
from protofed.SiteData import build_sites
from protofed.protofed_aux import PayloadGroups
from protofed.protofed_types import OptimizerKind

_ALL = PayloadGroups.from_strings("adapters", "prototypes", "head")


def _payload(client_id, num_samples, alpha, phi=None, rnd=1):
    return protofed.RoundPayload(client_id, rnd, num_samples, _ALL, alpha=alpha,
                                 phi=phi or {})


def _read_metrics(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_aggregation_weights_of_unequal_sites():
    weights = protofed.aggregation_weights([8962, 7601, 5099, 4080])
    np.testing.assert_allclose(weights, [0.3482, 0.2953, 0.1981, 0.1585],
                               atol=1e-4)
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_aggregation_weights_reject_empty_site():
    with pytest.raises(protofed.ProtocolError):
        protofed.aggregation_weights([10, 0])


def test_equal_sites_average():
    state = protofed.aggregate([_payload(1, 10, {"a": np.array([0.0, 2.0])}),
                                _payload(2, 10, {"a": np.array([2.0, 4.0])})])
    np.testing.assert_array_equal(state.alpha["a"], [1.0, 3.0])


def test_identical_payloads_are_a_fixed_point(rng):
    values = {"a": rng.standard_normal((3, 2))}
    state = protofed.aggregate([_payload(i, n, {"a": values["a"].copy()})
                                for i, n in ((1, 7), (2, 13), (3, 29))])
    np.testing.assert_array_equal(state.alpha["a"], values["a"])


def test_aggregate_matches_elementwise_oracle(rng):
    counts = [30, 12, 55]
    tensors = [rng.standard_normal((2, 3)) for _ in counts]
    state = protofed.aggregate([_payload(i + 1, n, {}, {"head": t})
                                for i, (n, t) in enumerate(zip(counts, tensors))])
    total = sum(counts)
    for idx in np.ndindex(2, 3):
        expected = sum(n / total * t[idx] for n, t in zip(counts, tensors))
        assert state.phi["head"][idx] == pytest.approx(expected, rel=1e-12)
    stacked = np.stack(tensors)
    assert np.all(state.phi["head"] <= stacked.max(axis=0) + 1e-12)
    assert np.all(state.phi["head"] >= stacked.min(axis=0) - 1e-12)


def test_aggregate_order_does_not_matter(rng):
    payloads = [_payload(i, n, {"a": rng.standard_normal(5)})
                for i, n in ((1, 3), (2, 8), (3, 4))]
    forward = protofed.aggregate(payloads)
    backward = protofed.aggregate(payloads[::-1])
    np.testing.assert_array_equal(forward.alpha["a"], backward.alpha["a"])


def test_missing_client_is_rejected_unless_partial():
    payloads = [_payload(1, 10, {"a": np.zeros(2)}),
                _payload(3, 30, {"a": np.ones(2)})]
    with pytest.raises(protofed.ProtocolError):
        protofed.aggregate(payloads, expected_clients=[1, 2, 3])
    state = protofed.aggregate(payloads, expected_clients=[1, 2, 3],
                               allow_partial=True)
    np.testing.assert_allclose(state.alpha["a"], [0.75, 0.75], rtol=1e-15)


def test_mismatched_payloads_are_rejected():
    with pytest.raises(protofed.ProtocolError):
        protofed.aggregate([_payload(1, 1, {"a": np.zeros(2)}),
                            _payload(2, 1, {"a": np.zeros(3)})])
    with pytest.raises(protofed.ProtocolError):
        protofed.aggregate([_payload(1, 1, {"a": np.zeros(2)}),
                            _payload(2, 1, {"a": np.zeros(2)}, rnd=2)])
    with pytest.raises(protofed.ProtocolError):
        protofed.aggregate([])


def test_communicated_groups_follow_switches(make_config):
    fed = make_config().federation
    assert communicated_groups(fed) == _ALL
    only_adapters = communicated_groups(replace(fed, communicate_prototypes=False))
    assert only_adapters.strings() == ["adapters"]
    no_head = communicated_groups(replace(fed, communicate_head=False))
    assert "head" not in no_head


def test_broadcast_makes_proximal_term_zero(make_config, small_sites):
    config = make_config()
    params = init_params(config.backbone, seed=0)
    client = make_client(1, small_sites.train[0], small_sites.val[0], params,
                         config)
    for t in client.params.trainable():
        t.data = t.data + 0.3
    state = global_from_params(params, communicated_groups(config.federation))
    protofed.broadcast(state, [client])
    for name, value in state.tensors.items():
        local = {**client.params.alpha, **client.params.phi}[name]
        np.testing.assert_array_equal(local.data, value)
        assert local.data is not value


def test_zero_learning_rate_returns_global_state(make_config, small_sites):
    config = make_config(optimizer=OptimizerKind.SGD, learning_rate=0.0)
    params = init_params(config.backbone, seed=0)
    client = make_client(1, small_sites.train[0], small_sites.val[0], params,
                         config)
    state = global_from_params(params, communicated_groups(config.federation))
    payload, metrics = protofed.local_update(client, state, config)
    for name, value in state.tensors.items():
        np.testing.assert_array_equal(payload.tensors[name], value)
    assert metrics.losses["prox"] == 0.0
    assert payload.num_samples == len(small_sites.train[0])


def test_local_update_leaves_backbone_untouched(make_config, small_sites):
    config = make_config()
    params = init_params(config.backbone, seed=0)
    backbone = {n: t.data.copy() for n, t in params.omega.items()}
    client = make_client(1, small_sites.train[0], small_sites.val[0], params,
                         config)
    state = global_from_params(params, communicated_groups(config.federation))
    payload, _ = protofed.local_update(client, state, config)
    for name, value in backbone.items():
        np.testing.assert_array_equal(client.params.omega[name].data, value)
    assert not set(payload.tensors) & set(params.omega)
    assert not np.array_equal(payload.alpha["adapter1.up"],
                              state.alpha["adapter1.up"])


def test_two_epochs_equal_two_single_epoch_updates(make_config, small_sites):
    one = make_config(local_epochs=1)
    two = make_config(local_epochs=2)
    params = init_params(one.backbone, seed=0)
    state = global_from_params(params, communicated_groups(one.federation))
    a = make_client(1, small_sites.train[0], small_sites.val[0], params, two)
    b = make_client(1, small_sites.train[0], small_sites.val[0], params, one)
    protofed.local_update(a, state, two)
    protofed.local_update(b, state, one)
    protofed.local_update(b, state, one)
    np.testing.assert_array_equal(a.params.flatten(), b.params.flatten())


def test_single_client_federation_equals_local_training(make_config):
    config = make_config(num_clients=1, rounds=3, use_prox=False)
    data = build_sites(config)
    params = init_params(config.backbone, seed=0)
    report = protofed.run_federation(config, data, initial=params)
    central = protofed.train_centralized(config, data.train[0], data.val[0],
                                         epochs=3, initial=params)
    np.testing.assert_array_equal(report.clients[0].params.flatten(),
                                  central.flatten())


def test_run_writes_metrics_and_checkpoints(make_config, small_sites,
                                            temp_output_dir):
    config = make_config()
    report = protofed.run_federation(config, small_sites, temp_output_dir)
    rows = _read_metrics(temp_output_dir / METRICS_NAME)
    assert len(rows) == 2 * (config.federation.rounds + 1)
    assert [int(r["round"]) for r in rows] == [0, 0, 1, 1, 2, 2]
    assert rows[0]["total"] == "" and rows[0]["payload_bytes"] == "0"
    assert int(rows[-1]["payload_bytes"]) == report.payload_bytes
    assert all(0.0 <= float(r["test_acc"]) <= 1.0 for r in rows)
    assert (temp_output_dir / ALIGNMENT_NAME).exists()
    assert (temp_output_dir / CONFIG_NAME).exists()
    assert (temp_output_dir / CHECKPOINT_DIR / GLOBAL_CHECKPOINT).exists()
    assert (temp_output_dir / CHECKPOINT_DIR / "client2.ckpt").exists()
    assert report.global_state.round == 2
    assert len(report.final_test_accuracy()) == 2


def test_zero_rounds_only_evaluates(make_config, small_sites, temp_output_dir):
    config = make_config(rounds=0)
    report = protofed.run_federation(config, small_sites, temp_output_dir)
    rows = _read_metrics(temp_output_dir / METRICS_NAME)
    assert [r["round"] for r in rows] == ["0", "0"]
    assert report.payload_bytes > 0


@pytest.mark.parametrize("optimizer", [OptimizerKind.Adam, OptimizerKind.SGD])
def test_thread_count_does_not_change_results(make_config, small_sites,
                                              temp_output_dir, optimizer):
    config = make_config(optimizer=optimizer)
    outputs = []
    for workers in (1, 2):
        run = replace(config, worker=protofed.WorkerSettings(workers))
        out = temp_output_dir / f"workers{workers}"
        protofed.run_federation(run, small_sites, out)
        outputs.append((out / METRICS_NAME).read_bytes())
    assert outputs[0] == outputs[1]


def test_default_payload_is_small_fraction_of_checkpoint():
    config = protofed.RunConfig()
    params = init_params(config.backbone, seed=0)
    groups = communicated_groups(config.federation)
    state = global_from_params(params, groups)
    payload = protofed.RoundPayload(1, 1, 100, groups, alpha=state.alpha,
                                    phi=state.phi)
    ratio = len(serialize_payload(payload)) / checkpoint_size(params)
    assert ratio <= 0.15


def test_compare_variants_shares_initial_model(make_config, small_sites,
                                               temp_output_dir):
    config = make_config(rounds=1)
    variants = [protofed.Variant.FedAvg, protofed.Variant.FedAdapter]
    table = protofed.compare_variants(config, small_sites, variants,
                                      temp_output_dir)
    assert [r.variant for r in table] == ["fedavg", "fedadapter"]
    assert (temp_output_dir / "comparison.csv").exists()
    assert table[1].payload_bytes < table[0].payload_bytes
    assert table[0].checkpoint_bytes == table[1].checkpoint_bytes


def test_initial_params_without_warmup_match_init(make_config, small_sites):
    config = make_config()
    np.testing.assert_array_equal(
        initial_params(config, small_sites).flatten(),
        init_params(config.backbone, config.federation.seed).flatten())


@pytest.mark.parametrize("calibrate", [True, False])
def test_warmup_then_calibration(make_config, calibrate):
    config = make_config()
    backbone = replace(config.backbone,
                       freeze_mode=protofed.FreezeMode.WarmupPretrained,
                       warmup_steps=3, warmup_samples=20,
                       calibrate_prototypes=calibrate)
    config = replace(config, backbone=backbone).validate()
    data = build_sites(config)
    params = initial_params(config, data)
    initial = init_params(backbone, config.federation.seed)
    assert all(not t.trainable for t in params.omega.values())
    moved = not np.array_equal(params.phi[PROTOTYPES].data,
                               initial.phi[PROTOTYPES].data)
    assert moved == calibrate


@pytest.mark.parametrize("reset", [True, False])
def test_reset_optimizer_restarts_moments_every_round(make_config, small_sites,
                                                      reset):
    config = make_config(reset_optimizer=reset)
    params = init_params(config.backbone, seed=0)
    client = make_client(1, small_sites.train[0], small_sites.val[0], params,
                         config)
    state = global_from_params(params, communicated_groups(config.federation))
    steps = len(client.sampler)
    protofed.local_update(client, state, config)
    assert client.optimizer.t == steps
    protofed.local_update(client, state, config)
    assert client.optimizer.t == (steps if reset else 2 * steps)


@pytest.mark.slow
def test_proximal_term_reduces_adapter_drift(make_config, temp_output_dir):
    """Test that mean adapter drift with the proximal term is below the drift
    without it in each of the last ten rounds."""
    config = make_config(num_clients=4, rounds=12)
    data = build_sites(config)
    initial = initial_params(config, data)
    drift = {}
    for mu in (0.0, 0.1):
        run = replace(config, loss=replace(config.loss, mu1=mu, mu2=mu))
        out = temp_output_dir / f"mu{mu}"
        protofed.run_federation(run, data, out, initial=initial)
        per_round = {}
        for row in _read_metrics(out / ALIGNMENT_NAME):
            per_round.setdefault(int(row["round"]), []).append(
                float(row["adapter_drift"]))
        drift[mu] = {r: np.mean(v) for r, v in per_round.items()}
    for rnd in range(3, 13):
        assert drift[0.1][rnd] < drift[0.0][rnd]
