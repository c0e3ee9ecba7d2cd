import os
import subprocess
from pathlib import Path

import numpy as np
import pytest

import saelab

CLI = os.environ.get("SAELAB_CLI")
SMALL = {
    "datagen.n_patients": "40",
    "model.n_layers": "2",
    "run.layer": "1",
}


def test_cohort_shape():
    c = saelab.generate_cohort(60, seed=2)
    assert len(c) == 60
    assert c.planted is not None
    for p in c.patients:
        assert len(p.token_ids) == len(p.time_deltas)
        assert p.time_deltas[0] == 0.0


def test_cohort_deterministic():
    a = saelab.generate_cohort(30, seed=9)
    b = saelab.generate_cohort(30, seed=9)
    assert [p.token_ids for p in a.patients] == [p.token_ids for p in b.patients]


def test_metrics_against_pairs():
    rng = np.random.default_rng(0)
    s = rng.normal(size=80)
    y = (rng.random(80) < 0.3).astype(int)
    pos, neg = s[y == 1], s[y == 0]
    ref = np.mean([(p > n) + 0.5 * (p == n) for p in pos for n in neg])
    assert saelab.auc_roc(s.tolist(), y.tolist()) == pytest.approx(ref, abs=1e-12)


def test_hungarian_small():
    score = np.array([[1.0, 5.0], [4.0, 1.0]])
    assert saelab.hungarian_maximize(score) == [1, 0]


def test_delta_identity_and_encode():
    rng = np.random.default_rng(1)
    rows = rng.normal(size=(300, 8))
    sae, _ = saelab.train_sae(rows, expansion=2, k=4, steps=60, batch_rows=64, seed=3)
    codes = sae.encode(rows)
    assert codes.shape == (300, 16)
    assert ((codes != 0).sum(axis=1) <= 4).all()
    same = saelab.apply_delta(sae, rows, np.ones(16, dtype=np.float32))
    assert np.array_equal(same, rows.astype(np.float32))
    zero = saelab.apply_reconstruct(sae, rows, np.zeros(16, dtype=np.float32))
    assert np.allclose(zero, np.tile(sae.b_dec, (300, 1)))


def test_sae_round_trip(tmp_path):
    sae = saelab.init_sae(8, expansion=2, k=4, seed=1)
    path = tmp_path / "s.ckpt"
    sae.save(path)
    back = saelab.load_sae(path)
    assert np.array_equal(back.w_dec, sae.w_dec)


def test_unknown_key_raises():
    with pytest.raises(saelab.ConfigError):
        saelab.run_stage("gen", {"nope.key": "1"})


def test_missing_prerequisite(tmp_path):
    with pytest.raises(saelab.MissingPrerequisite):
        saelab.run_stage("probe", {"run.out": str(tmp_path / "empty")})


def test_extract_all_layers(tmp_path):
    cfg = dict(SMALL, **{"run.out": str(tmp_path)})
    saelab.run_stage("gen", cfg)
    saelab.run_stage("extract", cfg)
    acts = sorted(p.name for p in (tmp_path / "activations").iterdir())
    assert acts == [f"layer{i}.act" for i in range(4)]
    assert saelab.verify_manifest(tmp_path) == []


def run_cli(*args):
    return subprocess.run([CLI, *args], capture_output=True, text=True)


needs_cli = pytest.mark.skipif(not CLI, reason="SAELAB_CLI not set")


@needs_cli
def test_cli_missing_prerequisite(tmp_path):
    r = run_cli("probe", "--out", str(tmp_path / "x"))
    assert r.returncode == 3
    assert "run `saelab" in r.stderr


@needs_cli
def test_cli_unknown_key(tmp_path):
    r = run_cli("gen", "--out", str(tmp_path), "--set", "bogus.key=1")
    assert r.returncode == 2


@needs_cli
def test_cli_bad_args():
    assert run_cli("frobnicate").returncode == 2
    assert run_cli("gen", "--jobs", "0").returncode == 2


@needs_cli
def test_cli_extract_default_layers(tmp_path):
    sets = []
    for k, v in {"datagen.n_patients": "40"}.items():
        sets += ["--set", f"{k}={v}"]
    assert run_cli("gen", "--out", str(tmp_path), *sets).returncode == 0
    r = run_cli("extract", "--out", str(tmp_path), "--layers", "all", *sets)
    assert r.returncode == 0, r.stderr
    acts = sorted(p.name for p in Path(tmp_path, "activations").iterdir())
    assert acts == [f"layer{i}.act" for i in range(6)]
