import json

import numpy as np
import pytest

from heritage_recon.autodiff import OptimState, Tape, Tensor, optimizer_step
from heritage_recon.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_RUNTIME, main
from heritage_recon.config import RunConfig
from heritage_recon.ingest import load_bundle
from heritage_recon.meshing import component_labels, read_mesh
from heritage_recon.trainer import Trainer

TINY = {
    "fields": {"sdf_width": 16, "sdf_depth": 2, "sdf_skip": [], "feature_dim": 4, "color_width": 8,
               "color_depth": 2, "embed_dim": 2, "pe_pos": 2, "pe_dir": 1},
    "sampler": {"n_coarse": 8, "n_importance": 4, "grid_resolution": 16},
    "loss": {"geo_points": 32},
    "train": {"iterations": 6, "batch_rays": 16, "image_long_side": 32, "checkpoint_every": 3},
}


@pytest.fixture(scope="module")
def config_file(tmp_path_factory, small_bundle):
    path = tmp_path_factory.mktemp("cfg") / "cfg.json"
    path.write_text(json.dumps({**TINY, "scene": str(small_bundle)}), encoding="utf-8")
    return path


@pytest.fixture(scope="module")
def trained(tmp_path_factory, config_file):
    out = tmp_path_factory.mktemp("run")
    assert main(["--threads", "1", "train", str(config_file), "--geo", "dense", "--color-loss", "on",
                 "--out", str(out)]) == EXIT_OK
    return out


# -- synth ------------------------------------------------------------------------------

def test_synth_writes_bundle(tmp_path, capsys):
    out = tmp_path / "b"
    code = main(["synth", "--views", "10", "--gray", "0.9", "--scene", "sphere-box", "--size", "16",
                 "--val", "1", "--dense-points", "300", str(out)])
    assert code == EXIT_OK
    assert "(9 gray)" in capsys.readouterr().out
    m = json.loads((out / "manifest.json").read_text())
    assert sum(v["gray"] for v in m["synthetic"]["views"].values()) == 9
    assert json.loads((out / "run_manifest.json").read_text())["command"] == "synth"


def test_synth_bad_gray_fraction(tmp_path, capsys):
    assert main(["synth", "--gray", "1.5", str(tmp_path / "b")]) == EXIT_CONFIG
    assert "gray fraction" in capsys.readouterr().err


def test_synth_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["synth", "--views", "2", "--size", "16", "--val", "0", "--dense-points", "50", str(blocker / "b")])
    assert code == EXIT_RUNTIME
    assert "error:" in capsys.readouterr().err


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--frobnicate"]) == EXIT_CONFIG


def test_bad_thread_env(monkeypatch, tmp_path):
    monkeypatch.setenv("HERITAGE_RECON_THREADS", "many")
    assert main(["eval", "--selftest"]) == EXIT_CONFIG


# -- train ------------------------------------------------------------------------------

def test_train_outputs(trained):
    recs = [json.loads(line) for line in (trained / "metrics.ndjson").read_text().splitlines()]
    assert [r["step"] for r in recs] == list(range(1, 7))
    assert any(r["l_geo"] > 0 for r in recs)
    for name in ("config.json", "run_manifest.json", "losses.png", "checkpoints/final.ckpt",
                 "checkpoints/step_000003.ckpt"):
        assert (trained / name).exists(), name
    manifest = json.loads((trained / "run_manifest.json").read_text())
    assert manifest["threads"] == 1
    assert manifest["config_sha256"] == RunConfig.load(trained / "config.json").digest()


def test_train_geo_none_has_no_geo_term(tmp_path, config_file):
    assert main(["train", str(config_file), "--geo", "none", "--iterations", "2", "--out", str(tmp_path)]) == EXIT_OK
    recs = [json.loads(line) for line in (tmp_path / "metrics.ndjson").read_text().splitlines()]
    assert len(recs) == 2 and all("l_geo" not in r for r in recs)


def test_train_resume_continues_step_counter(tmp_path, config_file):
    assert main(["train", str(config_file), "--iterations", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["train", str(config_file), "--iterations", "5", "--out", str(tmp_path),
                 "--resume", str(tmp_path / "checkpoints" / "final.ckpt")]) == EXIT_OK
    steps = [json.loads(line)["step"] for line in (tmp_path / "metrics.ndjson").read_text().splitlines()]
    assert steps == [1, 2, 3, 4, 5]


def test_train_config_errors(tmp_path, config_file):
    assert main(["train", str(config_file), "--set", "loss.nope=1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--iterations", "2"]) == EXIT_CONFIG
    assert main(["train", str(config_file), "--set", "novalue"]) == EXIT_CONFIG


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_numerical_failure_exit_3(tmp_path, config_file):
    code = main(["train", str(config_file), "--out", str(tmp_path), "--set", "train.lr=1e300",
                 "--set", "train.max_bad_steps=2", "--iterations", "50"])
    assert code == EXIT_NUMERIC
    assert (tmp_path / "checkpoints" / "last_good.ckpt").exists()


# -- mesh -------------------------------------------------------------------------------

def test_mesh_outputs(trained, tmp_path):
    code = main(["mesh", str(trained / "checkpoints" / "final.ckpt"), "--resolution", "16", "--out", str(tmp_path)])
    assert code == EXIT_OK
    mesh = read_mesh(tmp_path / "mesh.ply")
    assert not mesh.is_empty
    assert read_mesh(tmp_path / "mesh_normals.ply").vertices.shape == mesh.vertices.shape
    meta = json.loads((tmp_path / "mesh.meta.json").read_text())
    assert meta["resolution"] == 16 and meta["filter"] == "keep-largest" and meta["vertices"] == len(mesh.vertices)


def test_mesh_resolution_floor(trained, tmp_path):
    ckpt = str(trained / "checkpoints" / "final.ckpt")
    assert main(["mesh", ckpt, "--resolution", "7", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["mesh", ckpt, "--resolution", "8", "--out", str(tmp_path)]) == EXIT_OK


def test_mesh_missing_checkpoint(tmp_path):
    assert main(["mesh", str(tmp_path / "nope.ckpt"), "--out", str(tmp_path)]) == EXIT_RUNTIME


@pytest.fixture(scope="module")
def blob_checkpoint(tmp_path_factory, small_bundle):
    """A checkpoint whose SDF holds a main sphere plus a small detached blob."""
    d = json.loads(json.dumps(TINY))
    d["fields"].update(sdf_width=64, sdf_depth=3, pe_pos=3)
    d["scene"] = str(small_bundle)
    cfg = RunConfig.from_dict(d)
    scene = load_bundle(small_bundle, image_long_side=32)
    tr = Trainer(cfg, scene, tmp_path_factory.mktemp("blob")).initialize()
    c = np.asarray(scene.bounds.center)
    r = scene.bounds.sampling_radius
    body, blob = (c, 0.45 * r), (c + [0.7 * r, 0, 0], 0.15 * r)

    def target(p):
        return np.minimum(np.linalg.norm(p - body[0], axis=1) - body[1], np.linalg.norm(p - blob[0], axis=1) - blob[1])

    params = tr.model.sdf.parameters()
    state = OptimState.for_params(params, lr=2e-3)
    rng = np.random.default_rng(0)
    for _ in range(1500):
        p = c + rng.uniform(-r, r, (512, 3))
        with Tape() as tape:
            err = tr.model.sdf.forward(Tensor(p)).d - target(p)
            loss = (err * err).mean()
        optimizer_step(params, [g.data for g in tape.gradient(loss, params)], state)
    path = tr.out / "blob.ckpt"
    tr.save(path)
    return path


def test_mesh_filter_removes_planted_blob(blob_checkpoint, tmp_path):
    assert main(["mesh", str(blob_checkpoint), "--resolution", "32", "--filter", "none", "--name", "raw",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert main(["mesh", str(blob_checkpoint), "--resolution", "32", "--out", str(tmp_path)]) == EXIT_OK
    raw, kept = read_mesh(tmp_path / "raw.ply"), read_mesh(tmp_path / "mesh.ply")
    assert component_labels(raw)[0] == 2
    assert component_labels(kept)[0] == 1
    assert len(kept.faces) > 0.7 * len(raw.faces)


# -- render -----------------------------------------------------------------------------

def test_render_val_split(trained, tmp_path, small_bundle, capsys):
    code = main(["render", str(trained / "checkpoints" / "final.ckpt"), "--out", str(tmp_path)])
    assert code == EXIT_OK
    scene = load_bundle(small_bundle, image_long_side=32)
    val = scene.split_ids("val")
    for iid in val:
        stem = scene.images[iid].name.rsplit(".", 1)[0]
        for kind in ("color", "depth", "normal"):
            assert (tmp_path / f"{stem}_{kind}.png").exists()
    errors = json.loads((tmp_path / "render_errors.json").read_text())
    assert len(errors) == len(val)
    assert capsys.readouterr().out.count("mean abs error per channel") == len(val)


def test_render_embedding_selects_row(trained, tmp_path):
    ckpt = str(trained / "checkpoints" / "final.ckpt")
    for emb in ("average", "1"):
        assert main(["render", ckpt, "--image", "1", "--embedding", emb, "--out", str(tmp_path / emb)]) == EXIT_OK
    assert main(["render", ckpt, "--image", "999", "--out", str(tmp_path / "x")]) == EXIT_CONFIG


# -- eval -------------------------------------------------------------------------------

def test_eval_selftest(capsys):
    assert main(["eval", "--selftest"]) == EXIT_OK
    assert "14.4" in capsys.readouterr().out


def test_eval_identical_files(small_bundle, tmp_path, capsys):
    gt = str(small_bundle / "gt_points.ply")
    assert main(["eval", gt, gt, "--out", str(tmp_path)]) == EXIT_OK
    row = (tmp_path / "eval_table.txt").read_text().splitlines()[-1].split()
    assert row == ["100.0"] * 12
    assert json.loads((tmp_path / "eval.json").read_text())["f1"] == [1.0, 1.0, 1.0]
    assert (tmp_path / "eval_curves.png").exists()


def test_eval_unsorted_thresholds(small_bundle, tmp_path):
    gt = str(small_bundle / "gt_points.ply")
    assert main(["eval", gt, gt, "--thresholds", "0.3,0.1", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["eval", gt, "--out", str(tmp_path)]) == EXIT_CONFIG
