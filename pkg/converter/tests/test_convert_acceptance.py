"""Converter acceptance: fixture round-trip, plus an optional real-data run.

Prints one "[acceptance] ..." verdict line like the consumer package's
suite.  The real-recording check needs DBNET_REAL_GDF pointing at a
directory with A03T.gdf / A03E.gdf and is skipped otherwise.
"""

import json
import os

import numpy as np
import pytest

from dbnet.data import load_container
from gdf2eegb.cli import main
from gdf2eegb.convert import RULES, convert
from gdf_fixtures import mi_recording


def test_fixture_round_trip_exact(tmp_path, capsys):
    data, signals, _ = mi_recording(3, extra_channels=("EOG-left",),
                                    cues=((10.0, 769), (25.0, 770)), seed=42)
    (tmp_path / "rec.gdf").write_bytes(data)
    out = tmp_path / "rec.eegb"
    convert([tmp_path / "rec.gdf"], RULES["2b"].epoch_spec, out,
            expected_channels=3, class_names=("left hand", "right hand"),
            subject="B42")
    ts = load_container(out)
    shape_ok = (ts.m, ts.n_channels, ts.n_samples) == (2, 3, 1125)
    exact = True
    for i, cue in enumerate((2500, 6250)):
        start = cue - 125
        want = signals[:3, start:start + 1125].astype(np.float32)
        exact = exact and np.array_equal(ts.trials[i], want)
    ok = shape_ok and exact and list(ts.labels) == [0, 1]
    with capsys.disabled():
        print(f"\n[acceptance] converter round-trip: {'PASS' if ok else 'FAIL'}"
              f"  (2 trials, shapes {'ok' if shape_ok else 'bad'}, "
              f"values {'exact' if exact else 'off'})")
    assert ok


def test_real_2a_subject(tmp_path, capsys):
    root = os.environ.get("DBNET_REAL_GDF")
    if not root:
        pytest.skip("set DBNET_REAL_GDF to a directory with A03T.gdf / A03E.gdf")
    if not os.path.exists(os.path.join(root, "A03T.gdf")):
        pytest.skip(f"no A03T.gdf under {root}")
    out = tmp_path / "A03"
    code = main(["convert", "--dataset", "2a", "--subject", "3",
                 "--in", root, "--out", str(out)])
    assert code == 0
    report = json.loads((tmp_path / "A03_report.json").read_text())
    ts = load_container(tmp_path / "A03_train.eegb")
    per_class_ok = all(n <= 72 for n in report["train"]["per_class"].values())
    ok = (ts.n_channels, ts.n_samples, ts.n_classes) == (22, 1125, 4) \
        and per_class_ok and "dropped_artifact" in report["train"]
    with capsys.disabled():
        print(f"\n[acceptance] real-recording conversion: {'PASS' if ok else 'FAIL'}"
              f"  (C={ts.n_channels}, T={ts.n_samples}, classes={ts.n_classes}, "
              f"{report['train']['trials']} trials, "
              f"{report['train']['dropped_artifact']} artifact-dropped)")
    assert ok
