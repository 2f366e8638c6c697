"""
Integration tests for complete federated workflows.

Four toy clients with an external site, payload dumps and a thread pool,
followed by checkpoint inspection.
"""

import csv
from dataclasses import replace

import numpy as np
import pytest

import protofed
from protofed.Federation import ALIGNMENT_NAME, EXTERNAL_NAME, PAYLOAD_DIR
from protofed.Payload import deserialize_payload
from protofed.SiteData import build_sites


@pytest.fixture
def four_client_config(make_config):
    config = make_config(num_clients=4, rounds=3, dump_payloads=True)
    return replace(config, data=replace(config.data, external_size=10),
                   worker=protofed.WorkerSettings(2)).validate()


@pytest.mark.integration
@pytest.mark.slow
def test_four_client_run(four_client_config, temp_output_dir):
    """Run three rounds and check every artifact a run leaves behind."""
    data = build_sites(four_client_config)
    assert data.external is not None
    report = protofed.run_federation(four_client_config, data, temp_output_dir)

    payloads = sorted((temp_output_dir / PAYLOAD_DIR).glob("*.bin"))
    assert len(payloads) == 3 * 4
    last = [deserialize_payload(p.read_bytes()) for p in payloads
            if p.name.startswith("round003")]
    assert sorted(p.client_id for p in last) == [1, 2, 3, 4]
    assert [p.num_samples for p in sorted(last, key=lambda p: p.client_id)] == \
        [len(t) for t in data.train]
    state = protofed.aggregate(last, [1, 2, 3, 4])
    for name, value in report.global_state.tensors.items():
        np.testing.assert_array_equal(state.tensors[name], value)

    with open(temp_output_dir / ALIGNMENT_NAME, newline="") as f:
        drift = list(csv.DictReader(f))
    assert len(drift) == 3 * 4
    assert all(float(r["adapter_drift"]) >= 0.0 for r in drift)

    with open(temp_output_dir / EXTERNAL_NAME, newline="") as f:
        external = list(csv.DictReader(f))
    assert [r["client"] for r in external] == ["1", "2", "3", "4"]
    assert report.payload_ratio < 1.0


@pytest.mark.integration
@pytest.mark.slow
def test_personal_models_explain_test_images(four_client_config,
                                             temp_output_dir):
    data = build_sites(four_client_config)
    report = protofed.run_federation(replace(four_client_config, federation=replace(
        four_client_config.federation, rounds=1, dump_payloads=False)), data)
    backbone = four_client_config.backbone
    clients = [c.params for c in report.clients]
    image = data.test.images[data.test.diseased[0]]
    matrix = protofed.cross_client_agreement(image, clients, backbone)
    assert matrix.shape == (4, 4)
    np.testing.assert_array_equal(matrix, matrix.T)
    for params in clients:
        top = protofed.explain(image, params, backbone, top_k=2)
        assert top[0].score >= top[1].score
