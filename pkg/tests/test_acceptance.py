"""
End-to-end runs of the default desk-scale configuration.

These train the full four-block model for the default number of rounds and
take several minutes each; deselect them with ``-m "not slow"``.
"""

import csv

import numpy as np
import pytest

from protofed.Federation import METRICS_NAME
from protofed.Interpret import LOCALIZATION_IOU
from protofed.cli import EXIT_OK, main

pytestmark = [pytest.mark.slow, pytest.mark.integration]


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _final_test_accuracy(path):
    rows = _rows(path)
    last = max(int(r["round"]) for r in rows)
    return [float(r["test_acc"]) for r in rows if int(r["round"]) == last]


@pytest.mark.timeout(3600)
def test_default_run_learns_and_localizes(temp_output_dir):
    out = temp_output_dir / "ours"
    assert main(["train", "--output-dir", str(out), "--seed", "42",
                 "--log-level", "warning"]) == EXIT_OK
    assert np.mean(_final_test_accuracy(out / METRICS_NAME)) >= 0.90

    rows = _rows(out / "localization.csv")
    assert len(rows) >= 100
    hits = [float(r["iou"]) >= LOCALIZATION_IOU for r in rows]
    assert np.mean(hits) >= 0.7


@pytest.mark.timeout(10800)
def test_default_variant_grid_beats_chance(temp_output_dir):
    out = temp_output_dir / "grid"
    assert main(["train", "--output-dir", str(out), "--seed", "42",
                 "--variants", "default", "--log-level", "warning"]) == EXIT_OK
    rows = _rows(out / "comparison.csv")
    assert len(rows) >= 2
    for row in rows:
        assert float(row["avg"]) > 0.65, row["variant"]


def test_four_workers_reproduce_metrics(make_config, temp_output_dir):
    """Test that a four-client run gives identical metrics with four worker
    threads, twice, and with one."""
    config_file = str(make_config(num_clients=4, rounds=3).save(
        temp_output_dir / "four.ini"))
    outputs = []
    for name, workers in (("a", "4"), ("b", "4"), ("c", "1")):
        out = temp_output_dir / name
        assert main(["train", "--config", config_file, "--output-dir", str(out),
                     "--workers", workers, "--seed", "7",
                     "--log-level", "warning"]) == EXIT_OK
        outputs.append((out / METRICS_NAME).read_bytes())
    assert outputs[0] == outputs[1] == outputs[2]
