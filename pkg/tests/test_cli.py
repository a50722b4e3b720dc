import json

import numpy as np
import pytest

from handprior import checkpoint, cli, metrics, refine
from handprior.data import load_dataset
from handprior.pipeline import fit_prior, load_model, prepare_samples, save_model


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--n", 40, "--seed", 3, "--out", root / "data") == 0
    assert run("synth", "--n", 10, "--seed", 4, "--out", root / "ten") == 0
    return root


def train(root, out, *extra, data="data"):
    return run("train", "--arch", "deep", "--data", root / data, "--out", out, "--patch-size", 64,
               "--epochs", 2, "--batch-size", 4, *extra)


def test_train_manifest_records_arch_and_prior(tiny):
    assert train(tiny, tiny / "p30.dpck", "--prior-dim", 30, "--seed", 7) == 0
    manifest, tensors = checkpoint.load(tiny / "p30.dpck")
    assert manifest["arch"]["kind"] == "deep" and manifest["prior_dim"] == 30
    assert tensors["bottleneck.W"].shape == (30, 1024) and tensors["recon.W"].shape == (48, 30)
    assert (tiny / "p30.loss.csv").read_text().splitlines()[0] == "epoch,loss"


def test_direct_regression_manifest(tiny):
    assert train(tiny, tiny / "direct.dpck", "--prior-dim", 0) == 0
    manifest, tensors = checkpoint.load(tiny / "direct.dpck")
    assert manifest["prior_dim"] == 0
    assert tensors["out.W"].shape[0] == 48 and "bottleneck.W" not in tensors


def test_identical_runs_identical_bytes(tiny):
    for name in ("a", "b"):
        assert train(tiny, tiny / f"{name}.dpck", "--prior-dim", 8, "--seed", 2) == 0
        assert run("eval", "--model", tiny / f"{name}.dpck", "--data", tiny / "data",
                   "--out", tiny / f"eval_{name}") == 0
    assert (tiny / "a.dpck").read_bytes() == (tiny / "b.dpck").read_bytes()
    assert (tiny / "a.loss.csv").read_bytes() == (tiny / "b.loss.csv").read_bytes()
    for f in ("curve.csv", "joints.csv"):
        assert (tiny / "eval_a" / f).read_bytes() == (tiny / "eval_b" / f).read_bytes()


def test_frozen_reconstruction_layer(tiny):
    assert train(tiny, tiny / "frozen.dpck", "--prior-dim", 8, "--freeze-recon") == 0
    assert train(tiny, tiny / "free.dpck", "--prior-dim", 8) == 0
    _, frozen = checkpoint.load(tiny / "frozen.dpck")
    _, free = checkpoint.load(tiny / "free.dpck")
    samples = prepare_samples(load_dataset(tiny / "data").frames(), 64)
    pca = fit_prior(samples, 8)
    np.testing.assert_allclose(frozen["recon.W"], pca.components, atol=1e-6)
    np.testing.assert_allclose(frozen["recon.b"], pca.mean, atol=1e-6)
    assert not np.allclose(free["recon.W"], pca.components, atol=1e-6)


def test_eval_curve_monotone_and_identity_refine(tiny):
    assert run("eval", "--model", tiny / "direct.dpck", "--data", tiny / "data", "--out", tiny / "plain") == 0
    spec = refine.RefineSpec([32, 16, 8], [4, 2, 1], filters=2, fc=[4])
    (tiny / "refs").mkdir()
    for j in (0, 5):
        g = refine.build_refiner("orref", refine.RefineSpec.from_dict({**spec.to_dict(), "joint_index": j}))
        g.params["out.W"][...] = 0
        g.params["out.b"][...] = 0
        save_model(g, tiny / "refs" / f"joint_{j:02d}.dpck")
    assert run("eval", "--model", tiny / "direct.dpck", "--data", tiny / "data", "--out", tiny / "refined",
               "--refine", tiny / "refs", "--iterations", 3) == 0
    for f in ("curve.csv", "joints.csv"):
        assert (tiny / "plain" / f).read_bytes() == (tiny / "refined" / f).read_bytes()
    t, frac = metrics.read_curve_csv(tiny / "plain" / "curve.csv")
    assert t[0] == 0 and t[-1] == 80 and np.all(np.diff(frac) >= 0)


def test_overfit_ten_frames(tiny):
    assert train(tiny, tiny / "fit.dpck", "--prior-dim", 0, "--epochs", 300, "--batch-size", 10,
                 "--weight-decay", 0, data="ten") == 0
    assert run("eval", "--model", tiny / "fit.dpck", "--data", tiny / "ten", "--out", tiny / "fit") == 0
    overall = np.mean([float(r.split(",")[1]) for r in (tiny / "fit" / "joints.csv").read_text().splitlines()[1:]])
    assert overall < 5.0


def test_refine_train_and_load(tiny):
    assert run("refine-train", "--model", tiny / "direct.dpck", "--data", tiny / "data", "--out", tiny / "rt",
               "--joint", 2, "--joint", 7, "--patch-sizes", "32,16,8", "--pools", "4,2,1", "--epochs", 1) == 0
    refs = cli.load_refiners(tiny / "rt", 16)
    assert [j for j, g in enumerate(refs) if g is not None] == [2, 7]
    assert refine.spec_of(refs[7]).patch_sizes == [32, 16, 8]
    assert run("eval", "--model", tiny / "direct.dpck", "--data", tiny / "data", "--out", tiny / "rt_eval",
               "--refine", tiny / "rt") == 0


def test_bench_report(tiny, capsys):
    out = tiny / "bench.json"
    assert run("bench", "--model", tiny / "direct.dpck", tiny / "p30.dpck", "--runs", 5, "--warmup", 1,
               "--json", out) == 0
    report = json.loads(out.read_text())
    assert [r["arch"] for r in report] == ["deep", "deep"] and [r["prior_dim"] for r in report] == [0, 30]
    assert all(r["median_ms"] > 0 for r in report)
    assert "median" in capsys.readouterr().out
    assert run("bench", "--model", tiny / "direct.dpck", "--runs", 2, "--warmup", 0,
               "--with-refine", tiny / "refs") == 0


def test_config_defaults_and_override(tiny):
    cfg = tiny / "cfg.json"
    cfg.write_text(json.dumps({"arch": "deep", "prior_dim": 12, "epochs": 1, "patch_size": 64, "seed": 4}))
    assert run("--config", cfg, "train", "--data", tiny / "data", "--out", tiny / "c1.dpck") == 0
    assert checkpoint.load(tiny / "c1.dpck")[0]["prior_dim"] == 12
    assert run("--config", cfg, "train", "--data", tiny / "data", "--out", tiny / "c2.dpck", "--prior-dim", 5) == 0
    assert checkpoint.load(tiny / "c2.dpck")[0]["prior_dim"] == 5


def test_missing_data_dir(tmp_path, capsys):
    assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m.dpck") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error:") and "nope" in err[0]


def test_invalid_arch_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("train", "--arch", "wide", "--data", tmp_path, "--out", tmp_path / "m.dpck")
    assert exc.value.code == 2


def test_joint_mismatch_rejected(tiny, tmp_path, capsys):
    idx = json.loads((tiny / "data" / "index.json").read_text())
    for f in idx["frames"]:
        f["pose"] = f["pose"][:14]
        f["depth"] = str(tiny / "data" / f["depth"])
    idx["num_joints"] = 14
    (tmp_path / "index.json").write_text(json.dumps(idx))
    assert run("eval", "--model", tiny / "direct.dpck", "--data", tmp_path, "--out", tmp_path / "e") == 1
    assert "joints" in capsys.readouterr().err


def test_bad_refine_joint(tiny):
    assert run("refine-train", "--model", tiny / "direct.dpck", "--data", tiny / "data", "--out", tiny / "bad",
               "--joint", 16, "--epochs", 1) == 1


def test_load_model_rejects_foreign_tensors(tiny, tmp_path):
    manifest, tensors = checkpoint.load(tiny / "direct.dpck")
    tensors["extra"] = np.zeros(2, np.float32)
    checkpoint.save(tmp_path / "x.dpck", manifest, tensors)
    with pytest.raises(checkpoint.CheckpointError):
        load_model(tmp_path / "x.dpck")
