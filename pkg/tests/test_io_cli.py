import json
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from brm import io
from brm.cli import EXIT_DIVERGENCE, EXIT_OK, EXIT_USAGE, EXIT_VERIFY, load_config, main, UsageError
from brm.errors import InvariantError
from brm.mdp import generate_dataset, random_mdp
from brm.objective import ParamPoint, for_mdp, full_batch
from brm.sgda import default_init, harmonic_stepsize


def run(tmp_path, *args):
    return main([*args, "--output-dir", str(tmp_path)])


# ----------------------------------------------------------------------------
# file formats

@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_float_roundtrip(tmp_path_factory, xs):
    path = tmp_path_factory.mktemp("csv") / "x.csv"
    io.write_csv(path, ["x"], ([x] for x in xs))
    _, rows = io.read_csv(path)
    assert [float(r[0]) for r in rows] == xs


def test_mdp_roundtrip(tmp_path):
    mdp = random_mdp(4, 3, 0.9, seed=5)
    io.save_mdp(tmp_path / "m.json", mdp)
    back = io.load_mdp(tmp_path / "m.json")
    np.testing.assert_array_equal(back.transition, mdp.transition)
    np.testing.assert_array_equal(back.reward, mdp.reward)
    assert back.discount == mdp.discount


def test_dataset_roundtrip(tmp_path):
    mdp = random_mdp(3, 2, 0.5, seed=1)
    data = generate_dataset(mdp, n=50, seed=2)
    io.save_dataset(tmp_path / "d.csv", data)
    back = io.load_dataset(tmp_path / "d.csv", mdp)
    for name in ("s", "a", "r", "s_next"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
    np.testing.assert_array_equal(back.behavior_policy, data.behavior_policy)
    assert back.mode == data.mode and back.seed == data.seed


def test_dataset_bad_row(tmp_path):
    mdp = random_mdp(3, 2, 0.5, seed=1)
    io.save_dataset(tmp_path / "d.csv", generate_dataset(mdp, n=10, seed=2))
    lines = (tmp_path / "d.csv").read_text().splitlines()
    lines[4] = "3,9,0,0.5,0"
    (tmp_path / "d.csv").write_text("\n".join(lines) + "\n")
    with pytest.raises(InvariantError) as exc:
        io.load_dataset(tmp_path / "d.csv", mdp)
    assert exc.value.row == 3


def test_index_log_roundtrip(tmp_path):
    idx = np.random.default_rng(0).integers(0, 9, size=(12, 4))
    io.save_index_log(tmp_path / "i.csv", idx)
    np.testing.assert_array_equal(io.load_index_log(tmp_path / "i.csv"), idx)


def test_json_sorted_and_nan(tmp_path):
    io.dump_json(tmp_path / "a.json", {"b": np.float64("nan"), "a": np.arange(3)})
    text = (tmp_path / "a.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    assert io.load_json(tmp_path / "a.json")["a"] == [0, 1, 2]


# ----------------------------------------------------------------------------
# config

def test_config_precedence(tmp_path):
    (tmp_path / "c.yaml").write_text("seed: 5\nsgda:\n  c1: 3.0\n")
    cfg = load_config(str(tmp_path / "c.yaml"), ["sgda.c1=7"], env={"BRM_SEED": "9"})
    assert cfg["seed"] == 5 and cfg["sgda"]["c1"] == 7 and cfg["sgda"]["c2"] == 100.0
    assert load_config(None, [], env={"BRM_SEED": "9"})["seed"] == 9
    with pytest.raises(UsageError):
        load_config(None, ["nokey"], env={})


# ----------------------------------------------------------------------------
# subcommands

def test_gen_mdp_valid_and_deterministic(tmp_path):
    args = ["gen-mdp", "--states", "3", "--actions", "2", "--beta", "0.9", "--seed", "7"]
    assert run(tmp_path / "a", *args) == EXIT_OK
    assert run(tmp_path / "b", *args) == EXIT_OK
    mdp = io.load_mdp(tmp_path / "a" / "mdp.json")
    assert mdp.transition.shape == (3, 2, 3) and mdp.discount == 0.9
    np.testing.assert_allclose(mdp.transition.sum(-1), 1.0, atol=1e-12)
    assert io.sha256(tmp_path / "a" / "mdp.json") == io.sha256(tmp_path / "b" / "mdp.json")


@pytest.mark.parametrize("beta", ["1.0", "0", "-0.2"])
def test_gen_mdp_rejects_beta(tmp_path, beta, capsys):
    assert run(tmp_path, "gen-mdp", "--states", "3", "--actions", "2", "--beta", beta) == EXIT_USAGE
    assert "beta" in capsys.readouterr().err


def test_manifest_lists_every_file(tmp_path):
    assert run(tmp_path, "gen-data", "--preset", "demo", "--n", "40", "--seed", "3") == EXIT_OK
    man = io.load_json(tmp_path / "manifest.json")
    listed = {f["path"]: f["sha256"] for f in man["files"]}
    on_disk = {p.name for p in tmp_path.iterdir() if p.name != "manifest.json"}
    assert set(listed) == on_disk
    for name, digest in listed.items():
        assert io.sha256(tmp_path / name) == digest
    assert man["seeds"]["seed"] == 3 and man["status"] == "ok"


@pytest.fixture
def generated(tmp_path):
    out = tmp_path / "gen"
    assert run(out, "gen-data", "--preset", "demo", "--n", "30", "--seed", "4") == EXIT_OK
    return out


def test_train_one_full_batch_step(tmp_path, generated):
    out = tmp_path / "train"
    code = run(out, "train", "--mdp", str(generated / "mdp.json"), "--data", str(generated / "dataset.csv"),
               "--T", "1", "--batch-size", "30", "--set", "sgda.sampling=without_replacement")
    assert code == EXIT_OK
    mdp = io.load_mdp(generated / "mdp.json")
    data = io.load_dataset(generated / "dataset.csv", mdp)
    param = for_mdp(mdp, data)
    p0 = default_init(param, data)
    ev = full_batch(param, p0, data)
    eta = harmonic_stepsize(20.0, 100.0, 0)
    final = io.load_point(out / "final.json")
    np.testing.assert_allclose(final.w, p0.w - eta * ev.grad_w, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(final.v, p0.v + eta * ev.grad_v, rtol=1e-12, atol=1e-14)


def test_train_rerun_identical(tmp_path):
    args = ["train", "--preset", "demo", "--n", "60", "--T", "500", "--seed", "2", "--set", "sgda.record_every=50"]
    assert run(tmp_path / "a", *args) == EXIT_OK
    assert run(tmp_path / "b", *args) == EXIT_OK
    for name in ("trace.csv", "index_log.csv", "final.json"):
        assert io.sha256(tmp_path / "a" / name) == io.sha256(tmp_path / "b" / name)
    _, rows = io.read_csv(tmp_path / "a" / "trace.csv")
    gaps = np.array([float(r[1]) for r in rows])
    assert np.all(gaps >= -1e-12)


def test_train_divergence_exit(tmp_path):
    code = run(tmp_path, "train", "--preset", "demo", "--n", "40", "--T", "2000",
               "--set", "sgda.c1=1e6", "--set", "sgda.c2=1")
    assert code == EXIT_DIVERGENCE
    man = io.load_json(tmp_path / "manifest.json")
    assert man["status"] == "diverged" and "t" in man["failure"]


def test_verify_demo_passes(tmp_path):
    assert run(tmp_path, "verify", "--preset", "demo", "--n", "200", "--min-visits", "2") == EXIT_OK
    rep = io.load_json(tmp_path / "verify.json")
    assert rep["passed"] and rep["lemmas"]["ascent_equality_gap"] <= 1e-12


def test_verify_deterministic_ring_has_no_bias(tmp_path):
    assert run(tmp_path, "verify", "--preset", "ring", "--beta", "0.4", "--n", "120", "--min-visits", "2") == EXIT_OK
    rep = io.load_json(tmp_path / "verify.json")
    ds = next(c for c in rep["checks"] if c["check"] == "double_sampling_identity")
    assert ds["max_bias_term"] == 0.0


def test_verify_corrupted_row(tmp_path, generated, capsys):
    lines = (generated / "dataset.csv").read_text().splitlines()
    fields = lines[6].split(",")
    fields[3] = "123.5"
    lines[6] = ",".join(fields)
    (generated / "dataset.csv").write_text("\n".join(lines) + "\n")
    out = tmp_path / "v"
    assert run(out, "verify", "--mdp", str(generated / "mdp.json"), "--data", str(generated / "dataset.csv")) \
        == EXIT_VERIFY
    rep = io.load_json(out / "verify.json")
    assert not rep["passed"] and rep["checks"][0]["row"] == 5


def test_constants_and_bound(tmp_path):
    assert run(tmp_path, "constants", "--preset", "demo", "--n", "100", "--min-visits", "2") == EXIT_OK
    k = io.load_json(tmp_path / "constants.json")
    assert all(k[name] > 0 for name in ("L_hat", "rho_hat", "G_hat", "mu_pl_hat", "mu_qg_hat"))
    out = tmp_path / "b"
    assert run(out, "bound", "--preset", "demo", "--n", "100", "--min-visits", "2",
               "--constants", str(tmp_path / "constants.json")) == EXIT_OK
    assert (out / "bound.json").exists()


def test_stability_sweep_smoke(tmp_path):
    sets = ["--set", "stability.n_grid=[50, 800]", "--set", "stability.T_grid=[300]",
            "--set", "stability.replicates=2", "--set", "stability.i_subsample=5", "--set", "stability.probe_budget=100"]
    assert run(tmp_path / "a", "stability-sweep", "--preset", "demo", *sets) == EXIT_OK
    assert run(tmp_path / "b", "stability-sweep", "--preset", "demo", *sets, "--jobs", "2") == EXIT_OK
    header, rows = io.read_csv(tmp_path / "a" / "sweep.csv")
    assert header == io.SWEEP_HEADER and [int(r[0]) for r in rows] == [50, 800]
    assert all(float(r[3]) >= 0 for r in rows)
    assert (tmp_path / "a" / "report_n50_T300.json").exists()
    assert io.sha256(tmp_path / "a" / "sweep.csv") == io.sha256(tmp_path / "b" / "sweep.csv")


def test_console_script_usage_error(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "brm.cli", "gen-mdp", "--beta", "1.0", "--output-dir", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE
