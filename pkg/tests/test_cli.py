import hashlib
import json
import math

import numpy as np
import pytest

import clsreg.bench as bench
import clsreg.cli as cli
from clsreg.cli import EXIT_NONCONVERGED, EXIT_OK, EXIT_TRAIN, EXIT_TRIALS, EXIT_USAGE, main
from clsreg.geometry import chamfer_error, partial_view
from clsreg.io import read_cloud, write_cloud
from clsreg.shape_space import CategoryModel, TrainingError, decode

COMMON = ["--threads", "1", "--seed", "3"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def tree_digest(root):
    return {p.relative_to(root).as_posix(): digest(p) for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--count", "5", "--samples", "800", "--leaf", "0.12", "--output", str(data),
                 "--seed", "2"]) == EXIT_OK
    assert main(["train", "--input", str(data), "--output", str(root / "model.json"), "--canonical", "0",
                 *COMMON]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def model(workspace):
    return CategoryModel.from_json(json.loads((workspace / "model.json").read_text()))


def identity_annotation(path):
    doc = {"name": "g", "poses": [
        {"label": "pinch", "position": [0.2, 0.0, 0.1], "orientation": [1.0, 0.0, 0.0, 0.0], "meta": {"w": 1}},
        {"label": "wrap", "position": [-0.1, 0.1, 0.0],
         "orientation": [math.cos(0.3), 0.0, math.sin(0.3), 0.0], "meta": {}}]}
    path.write_text(json.dumps(doc))
    return doc


# ------------------------------------------------------------------ parsing

def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_missing_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == EXIT_USAGE


@pytest.mark.parametrize("sub, flags", [
    ("train", ["--input", "--output", "--canonical", "--seed", "--threads", "--beta", "--lambda", "--omega",
               "--config", "--set"]),
    ("infer", ["--model", "--input", "--output", "--sigma2", "--literal-eq12", "--allow-nonconverged",
               "--config"]),
    ("warp", ["--model", "--result", "--annotation", "--output", "--allow-nonconverged"]),
    ("generate", ["--model", "--latent", "--output", "--seed"]),
    ("bench", ["--input", "--output", "--threads", "--seed", "--beta", "--lambda", "--omega", "--sigma2",
               "--no-figures"]),
])
def test_help_lists_every_flag(capsys, sub, flags):
    with pytest.raises(SystemExit) as exc:
        main([sub, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for f in flags:
        assert f in text


def test_unknown_setting_key_exits_2(workspace, tmp_path):
    assert main(["train", "--input", str(workspace / "data"), "--output", str(tmp_path / "m.json"),
                 "--set", "cpd.gamma=2"]) == EXIT_USAGE
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"inference": {"speed": 1}}))
    assert main(["train", "--input", str(workspace / "data"), "--output", str(tmp_path / "m.json"),
                 "--config", str(cfg)]) == EXIT_USAGE
    assert not (tmp_path / "m.json").exists()


def test_invalid_values_exit_2(workspace, tmp_path):
    out = str(tmp_path / "m.json")
    data = str(workspace / "data")
    assert main(["train", "--input", data, "--output", out, "--omega", "1.5"]) == EXIT_USAGE
    assert main(["train", "--input", data, "--output", out, "--threads", "0"]) == EXIT_USAGE
    assert main(["train", "--input", data, "--output", out, "--canonical", "99"]) == EXIT_USAGE
    assert main(["train", "--input", str(tmp_path / "none"), "--output", out]) == EXIT_USAGE
    assert main(["train", "--input", data, "--output", str(tmp_path / "no" / "m.json")]) == EXIT_USAGE


def test_settings_precedence(tmp_path):
    parser = cli.build_parser()
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"cpd": {"beta": 2.0, "lambda": 5.0, "omega": 0.3}, "seed": 9}))
    args = parser.parse_args(["train", "--config", str(cfg), "--set", "cpd.lambda=4", "--set", "cpd.omega=0.2",
                              "--omega", "0.05"])
    s = cli.resolve_settings(args)
    assert s["cpd"]["beta"] == 2.0      # config over default
    assert s["cpd"]["lambda"] == 4      # --set over config
    assert s["cpd"]["omega"] == 0.05    # flag over --set
    assert s["seed"] == 9
    assert cli.default_settings()["cpd"]["beta"] == 1.0


# ------------------------------------------------------------------- train

def test_train_prints_summary_and_provenance(workspace, model, capsys, tmp_path):
    assert main(["train", "--input", str(workspace / "data"), "--output", str(tmp_path / "m.json"),
                 *COMMON]) == EXIT_OK
    out = capsys.readouterr().out
    assert "latent dimension q" in out and "explained variance" in out and out.count("residual") == 4
    assert model.explained_variance >= 0.95
    prov = model.provenance
    assert prov["settings"] == {"cpd": {"beta": 1.0, "lambda": 3.0, "omega": 0.1, "max_iterations": 150,
                                        "tolerance": 1e-6}, "seed": 3, "threads": 1}
    assert prov["inputs"] == [f"mug_{i:02d}.ply" for i in range(5)]


def test_train_is_byte_identical(workspace, tmp_path):
    out = tmp_path / "again.json"
    assert main(["train", "--input", str(workspace / "data"), "--output", str(out), "--canonical", "0",
                 *COMMON]) == EXIT_OK
    assert out.read_bytes() == (workspace / "model.json").read_bytes()


def test_two_instance_training_gives_one_dimension(workspace, tmp_path):
    src = tmp_path / "two"
    src.mkdir()
    for name in ("mug_00.ply", "mug_01.ply"):
        (src / name).write_bytes((workspace / "data" / name).read_bytes())
    assert main(["train", "--input", str(src), "--output", str(tmp_path / "m.json"), *COMMON]) == EXIT_OK
    assert json.loads((tmp_path / "m.json").read_text())["latent_dim"] == 1


def test_training_failure_exits_3(workspace, tmp_path, monkeypatch):
    def fail(*a, **kw):
        raise TrainingError("registration of 'mug_02' diverged")

    monkeypatch.setattr(cli, "train_category", fail)
    assert main(["train", "--input", str(workspace / "data"), "--output", str(tmp_path / "m.json")]) == EXIT_TRAIN


def test_train_does_not_touch_inputs(workspace, tmp_path):
    before = tree_digest(workspace / "data")
    main(["train", "--input", str(workspace / "data"), "--output", str(tmp_path / "m.json"), *COMMON])
    assert tree_digest(workspace / "data") == before


# ------------------------------------------------------------------- infer

def test_infer_canonical_observation(workspace, model, tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    write_cloud(obs, model.canonical)
    prefix = tmp_path / "fit"
    assert main(["infer", "--model", str(workspace / "model.json"), "--input", str(obs),
                 "--output", str(prefix)]) == EXIT_OK
    printed = capsys.readouterr().out
    assert "energy" in printed and "wall time" in printed
    completed = read_cloud(prefix.with_suffix(".ply"))
    assert chamfer_error(completed, model.canonical) < 1e-3
    doc = json.loads(prefix.with_suffix(".json").read_text())
    assert doc["converged"] and doc["provenance"]["input"] == "obs.csv"
    assert doc["provenance"]["inference"]["metric"] == "displacement"


def test_infer_partial_view_fills_occluded_side(workspace, model, tmp_path):
    full = read_cloud(workspace / "data" / "mug_04.ply")
    view = np.array([-1.0, 0.0, 0.3])
    part = partial_view(full, view)
    write_cloud(tmp_path / "part.ply", part)
    assert main(["infer", "--model", str(workspace / "model.json"), "--input", str(tmp_path / "part.ply"),
                 "--output", str(tmp_path / "fit")]) == EXIT_OK
    completed = read_cloud(tmp_path / "fit.ply")
    # points on the far side of the view direction, absent from the input
    assert np.sum(completed @ view < -0.1) > 10
    assert np.sum(part @ view < -0.1) < np.sum(completed @ view < -0.1)


def test_infer_nonconverged_exit_4(workspace, model, tmp_path):
    obs = tmp_path / "obs.csv"
    write_cloud(obs, read_cloud(workspace / "data" / "mug_04.ply"))
    args = ["infer", "--model", str(workspace / "model.json"), "--input", str(obs), "--output",
            str(tmp_path / "fit"), "--set", "inference.max_iterations=2"]
    assert main(args) == EXIT_NONCONVERGED
    assert (tmp_path / "fit.json").exists()
    assert main(args + ["--allow-nonconverged"]) == EXIT_OK


def test_infer_corrupt_ply_exit_2(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\nend_header\n1\n")
    assert main(["infer", "--model", str(workspace / "model.json"), "--input", str(bad),
                 "--output", str(tmp_path / "fit")]) == EXIT_USAGE
    assert "bad.ply" in capsys.readouterr().err


def test_infer_missing_model_exit_2(tmp_path):
    assert main(["infer", "--model", str(tmp_path / "none.json"), "--input", "x.ply",
                 "--output", str(tmp_path / "fit")]) == EXIT_USAGE


# -------------------------------------------------------------------- warp

def test_warp_identity_result(workspace, tmp_path):
    # with two instances the zero field is a design row, so it decodes exactly
    src = tmp_path / "two"
    src.mkdir()
    for name in ("mug_00.ply", "mug_03.ply"):
        (src / name).write_bytes((workspace / "data" / name).read_bytes())
    assert main(["train", "--input", str(src), "--output", str(tmp_path / "m.json"), *COMMON]) == EXIT_OK
    two = CategoryModel.from_json(json.loads((tmp_path / "m.json").read_text()))
    from clsreg.shape_space import encode_weights

    x = encode_weights(two, np.zeros_like(two.canonical))
    assert np.abs(decode(two, x).weights).max() < 1e-9
    res = {"x": x.tolist(), "theta": {"orientation": [1.0, 0, 0, 0], "position": [0.0, 0, 0]},
           "energy_trace": [0.0], "converged": True, "iterations": 0, "sigma2": 1e-3}
    (tmp_path / "res.json").write_text(json.dumps(res))
    ann = identity_annotation(tmp_path / "ann.json")
    assert main(["warp", "--model", str(tmp_path / "m.json"), "--result", str(tmp_path / "res.json"),
                 "--annotation", str(tmp_path / "ann.json"), "--output", str(tmp_path / "w.json")]) == EXIT_OK
    out = json.loads((tmp_path / "w.json").read_text())
    assert [p["label"] for p in out["poses"]] == ["pinch", "wrap"]
    for a, b in zip(ann["poses"], out["poses"]):
        np.testing.assert_allclose(b["position"], a["position"], atol=1e-6)
        assert abs(abs(np.dot(b["orientation"], a["orientation"])) - 1.0) < 1e-6
        assert b["meta"] == a["meta"]


def test_warp_after_infer_and_missing_annotation(workspace, tmp_path):
    write_cloud(tmp_path / "obs.ply", 1.1 * read_cloud(workspace / "data" / "mug_00.ply"))
    assert main(["infer", "--model", str(workspace / "model.json"), "--input", str(tmp_path / "obs.ply"),
                 "--output", str(tmp_path / "fit"), "--allow-nonconverged"]) == EXIT_OK
    identity_annotation(tmp_path / "ann.json")
    base = ["warp", "--model", str(workspace / "model.json"), "--result", str(tmp_path / "fit.json"),
            "--output", str(tmp_path / "w.json")]
    assert main(base + ["--annotation", str(tmp_path / "missing.json")]) == EXIT_USAGE
    assert main(base + ["--annotation", str(tmp_path / "ann.json")]) == EXIT_OK
    out = json.loads((tmp_path / "w.json").read_text())
    assert all(abs(np.linalg.norm(p["orientation"]) - 1) < 1e-9 for p in out["poses"])


def test_warp_refuses_nonconverged_result(workspace, model, tmp_path):
    from clsreg.shape_space import encode_weights

    res = {"x": encode_weights(model, np.zeros_like(model.canonical)).tolist(),
           "theta": {"orientation": [1.0, 0, 0, 0], "position": [0.0, 0, 0]},
           "energy_trace": [0.0], "converged": False, "iterations": 1, "sigma2": 1e-3}
    (tmp_path / "res.json").write_text(json.dumps(res))
    identity_annotation(tmp_path / "ann.json")
    args = ["warp", "--model", str(workspace / "model.json"), "--result", str(tmp_path / "res.json"),
            "--annotation", str(tmp_path / "ann.json"), "--output", str(tmp_path / "w.json")]
    assert main(args) == EXIT_NONCONVERGED
    assert main(args + ["--allow-nonconverged"]) == EXIT_OK


# ---------------------------------------------------------------- generate

def test_generate_training_latent_matches_instance(workspace, model, tmp_path):
    x = model.training_latents[1]
    out = tmp_path / "g.ply"
    assert main(["generate", "--model", str(workspace / "model.json"),
                 "--latent=" + ",".join(repr(float(v)) for v in x), "--output", str(out)]) == EXIT_OK
    inst = read_cloud(workspace / "data" / f"{model.labels[1]}.ply")
    assert chamfer_error(read_cloud(out), inst) <= model.residuals[1] * 1.05 + 1e-12


def test_generate_zero_is_mean_shape_and_extrapolation_finite(workspace, model, tmp_path):
    out = tmp_path / "g.ply"
    assert main(["generate", "--model", str(workspace / "model.json"), "--latent",
                 ",".join(["0"] * model.latent_dim), "--output", str(out)]) == EXIT_OK
    np.testing.assert_allclose(read_cloud(out), decode(model, np.zeros(model.latent_dim)).deformed_template)
    x2 = 2 * model.training_latents[0]
    assert main(["generate", "--model", str(workspace / "model.json"),
                 "--latent=" + ",".join(map(repr, x2.tolist())), "--output", str(out)]) == EXIT_OK
    assert np.all(np.isfinite(read_cloud(out)))


def test_generate_wrong_length_exit_2(workspace, model, tmp_path):
    assert main(["generate", "--model", str(workspace / "model.json"), "--latent",
                 ",".join(["1"] * (model.latent_dim + 1)), "--output", str(tmp_path / "g.ply")]) == EXIT_USAGE
    assert main(["generate", "--model", str(workspace / "model.json"), "--latent", "a,b",
                 "--output", str(tmp_path / "g.ply")]) == EXIT_USAGE


def test_generate_random_is_seeded(workspace, tmp_path):
    a, b = tmp_path / "a.ply", tmp_path / "b.ply"
    for p in (a, b):
        assert main(["generate", "--model", str(workspace / "model.json"), "--seed", "7", "--output", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()


# ------------------------------------------------------------------- bench

def tiny_plan_file(path, **kw):
    plan = dict(n_train=3, n_test=1, samples_per_instance=600, leaf=0.15, noise_factors=[0.0],
                misalignments=[], visibilities=["full"], methods=["CLS"], seed=1)
    plan.update(kw)
    path.write_text(json.dumps(plan))
    return path


def test_minimal_bench_writes_one_record(tmp_path):
    plan = tiny_plan_file(tmp_path / "plan.json")
    assert main(["bench", "--input", str(plan), "--output", str(tmp_path / "out"), "--threads", "1",
                 "--no-figures"]) == EXIT_OK
    lines = (tmp_path / "out" / "records.csv").read_text().splitlines()
    assert len(lines) == 2
    assert not list((tmp_path / "out").glob("*.png"))


def test_bench_is_byte_identical(tmp_path):
    plan = tiny_plan_file(tmp_path / "plan.json", n_test=2, methods=["CLS", "CPD"],
                          visibilities=["full", "partial"], views=[[-1, 0, 0.3]])
    for name in ("a", "b"):
        assert main(["bench", "--input", str(plan), "--output", str(tmp_path / name), "--threads", "1"]) == 0
    a, b = tree_digest(tmp_path / "a"), tree_digest(tmp_path / "b")
    a.pop("timings.csv"), b.pop("timings.csv")
    assert a == b and "error_partial.png" in a


def test_bench_flags_override_plan(tmp_path):
    plan = tiny_plan_file(tmp_path / "plan.json", cpd={"beta": 1.0, "lambda": 3.0, "omega": 0.1,
                                                        "max_iterations": 150, "tolerance": 1e-6})
    assert main(["bench", "--input", str(plan), "--output", str(tmp_path / "o"), "--threads", "1",
                 "--set", "seed=4", "--omega", "0.2", "--sigma2", "0.004", "--no-figures"]) == 0
    eff = json.loads((tmp_path / "o" / "plan.json").read_text())
    assert eff["seed"] == 4 and eff["cpd"]["omega"] == 0.2 and eff["inference"]["sigma2"] == 0.004


def test_bench_trial_failure_exit_5(tmp_path, monkeypatch):
    def broken(*a, **kw):
        raise RuntimeError("solver exploded")

    monkeypatch.setattr(bench, "infer", broken)
    plan = tiny_plan_file(tmp_path / "plan.json")
    assert main(["bench", "--input", str(plan), "--output", str(tmp_path / "o"), "--threads", "1",
                 "--no-figures"]) == EXIT_TRIALS
    assert "error" in (tmp_path / "o" / "records.csv").read_text()


def test_bench_bad_plan_exit_2(tmp_path):
    bad = tmp_path / "plan.json"
    bad.write_text(json.dumps({"folds": 3}))
    assert main(["bench", "--input", str(bad), "--output", str(tmp_path / "o")]) == EXIT_USAGE
    assert main(["bench", "--input", str(bad), "--config", str(bad), "--output", str(tmp_path / "o")]) == EXIT_USAGE
    assert not (tmp_path / "o").exists()
