import json

import numpy as np
import pytest

from heritage_recon.config import ConfigError, RunConfig, override
from heritage_recon.ingest import load_bundle
from heritage_recon.trainer import NumericalFailure, Trainer

TINY = {
    "fields": {"sdf_width": 16, "sdf_depth": 2, "sdf_skip": [], "feature_dim": 4, "color_width": 8,
               "color_depth": 2, "embed_dim": 2, "pe_pos": 2, "pe_dir": 1},
    "sampler": {"n_coarse": 8, "n_importance": 4, "grid_resolution": 16, "grid_update_every": 5},
    "loss": {"geo_points": 32},
    "train": {"batch_rays": 16, "image_long_side": 32, "checkpoint_every": 10},
}


def tiny_config(**loss):
    d = json.loads(json.dumps(TINY))
    d["loss"].update(loss)
    return RunConfig.from_dict(d)


@pytest.fixture(scope="module")
def scene(small_bundle):
    return load_bundle(small_bundle, image_long_side=32)


def test_round_trip(tmp_path):
    cfg = tiny_config(geo="sparse")
    cfg.save(tmp_path / "c.json")
    back = RunConfig.load(tmp_path / "c.json")
    assert back == cfg and back.digest() == cfg.digest()


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="n_coarse_typo"):
        RunConfig.from_dict({"sampler": {"n_coarse_typo": 3}})


@pytest.mark.parametrize("d", [{"loss": {"geo": "mvs"}}, {"train": {"lr": 0}}, {"fields": {"sdf_skip": [9]}},
                               {"train": {"lr_schedule": "step"}}, {"sampler": "x"}])
def test_invalid_values_rejected(d):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(d)


def test_override():
    cfg = override(RunConfig(), "loss.lam", 0.5)
    assert cfg.loss.lam == 0.5 and RunConfig().loss.lam == 0.1
    with pytest.raises(ConfigError):
        override(RunConfig(), "loss.nope", 1)


def test_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "c.json")


def test_resume_reproduces_uninterrupted_run(scene, tmp_path):
    cfg = tiny_config()
    straight = Trainer(cfg, scene, tmp_path / "a").initialize()
    straight.run(100, log_path=tmp_path / "a.ndjson")

    first = Trainer(cfg, scene, tmp_path / "b").initialize()
    first.run(50, log_path=tmp_path / "b.ndjson")
    second = Trainer.resume(cfg, scene, tmp_path / "b" / "checkpoints" / "final.ckpt", tmp_path / "b")
    assert second.step == 50
    second.run(100, log_path=tmp_path / "b.ndjson")
    assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()
    for p, q in zip(straight.model.parameters(straight.lcfg), second.model.parameters(second.lcfg)):
        assert np.array_equal(p.data, q.data)


def test_log_layout_follows_geo_mode(scene, tmp_path):
    for mode in ("none", "dense"):
        Trainer(tiny_config(geo=mode), scene, tmp_path / mode).initialize().run(3, log_path=tmp_path / f"{mode}.ndjson")
        recs = [json.loads(line) for line in (tmp_path / f"{mode}.ndjson").read_text().splitlines()]
        assert [r["step"] for r in recs] == [1, 2, 3]
        assert all(("l_geo" in r) == (mode == "dense") for r in recs)
        assert all(np.isfinite(r["total"]) for r in recs)


def test_periodic_checkpoints(scene, tmp_path):
    Trainer(tiny_config(), scene, tmp_path).initialize().run(25)
    names = sorted(p.name for p in (tmp_path / "checkpoints").glob("*.ckpt"))
    assert names == ["final.ckpt", "step_000010.ckpt", "step_000020.ckpt"]


def test_poisoned_model_raises_numerical_failure(scene, tmp_path):
    d = json.loads(json.dumps(TINY))
    d["train"]["max_bad_steps"] = 3
    tr = Trainer(RunConfig.from_dict(d), scene, tmp_path).initialize()
    tr.model.sdf.params.weights[0].data[:] = np.nan
    with pytest.raises(NumericalFailure):
        tr.run(10)


def test_dense_mode_needs_dense_cloud(scene):
    from dataclasses import replace

    with pytest.raises(ValueError):
        Trainer(tiny_config(geo="dense"), replace(scene, dense=None))
