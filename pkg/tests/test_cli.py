"""Command-line pipeline: gen, train, track, eval, report."""

import json
import os

import numpy as np
import pytest

from softtrack.cli import main
from softtrack.experiments import MANIFEST_NAME, load_manifest

TINY_CONFIG = {
    "sim": {"num_particles": 2, "num_frames": 30, "particle_radius": 0.08,
            "init_velocity_sigma": 0.02},
    "model": {"embed_dim": 8, "window_past": 2, "num_layers": 1},
    "train": {"epochs": 1, "batch_size": 4, "window": 16},
    "train_sequences": 3,
    "test_sequences": 2,
    "seed": 11,
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the read-only assertions below."""
    root = tmp_path_factory.mktemp("pipeline")
    config = root / "config.json"
    config.write_text(json.dumps(TINY_CONFIG))
    paths = {
        "root": root,
        "config": str(config),
        "data": str(root / "data"),
        "ckpt": str(root / "model.npz"),
        "sim_ckpt": str(root / "sim.npz"),
        "log": str(root / "loss.jsonl"),
        "tracks": str(root / "tracks"),
        "iou_tracks": str(root / "iou_tracks"),
        "eval": str(root / "eval.json"),
        "iou_eval": str(root / "iou_eval.json"),
    }
    assert main(["gen", "--config", paths["config"], "--out", paths["data"]]) == 0
    assert main(["train", "--config", paths["config"], "--data", paths["data"],
                 "--out", paths["ckpt"], "--log", paths["log"], "--quiet"]) == 0
    assert main(["train", "--config", paths["config"], "--data", paths["data"],
                 "--out", paths["sim_ckpt"], "--kind", "similarity",
                 "--quiet"]) == 0
    assert main(["track", "--config", paths["config"], "--data", paths["data"],
                 "--out", paths["tracks"], "--method", "assoc",
                 "--checkpoint", paths["ckpt"]]) == 0
    assert main(["track", "--config", paths["config"], "--data", paths["data"],
                 "--out", paths["iou_tracks"], "--method", "iou"]) == 0
    assert main(["eval", "--data", paths["data"], "--hyp", paths["tracks"],
                 "--out", paths["eval"], "--occlusion"]) == 0
    assert main(["eval", "--data", paths["data"], "--hyp", paths["iou_tracks"],
                 "--out", paths["iou_eval"]]) == 0
    return paths


def test_gen_writes_a_pinned_manifest(pipeline):
    manifest = load_manifest(pipeline["data"])
    assert len(manifest["train"]) == 3
    assert len(manifest["test"]) == 2
    entry = manifest["train"][0]
    assert entry["file"] == "train/seq_0000.jsonl"
    assert isinstance(entry["seed"], int)
    for entry in manifest["train"] + manifest["test"]:
        assert os.path.exists(os.path.join(pipeline["data"], entry["file"]))


def test_gen_is_reproducible(pipeline, tmp_path):
    again = str(tmp_path / "again")
    assert main(["gen", "--config", pipeline["config"], "--out", again]) == 0
    for entry in load_manifest(pipeline["data"])["test"]:
        first = open(os.path.join(pipeline["data"], entry["file"]), "rb").read()
        second = open(os.path.join(again, entry["file"]), "rb").read()
        assert first == second


def test_train_writes_checkpoint_and_log(pipeline):
    assert os.path.exists(pipeline["ckpt"])
    records = [json.loads(s)
               for s in open(pipeline["log"]).read().splitlines() if s.strip()]
    assert records and {"epoch", "batch", "loss"} <= set(records[0])


def test_track_persists_one_output_per_sequence(pipeline):
    names = sorted(os.listdir(pipeline["tracks"]))
    assert names == ["seq_0000.tracks.jsonl", "seq_0001.tracks.jsonl"]


def test_eval_payload_shape(pipeline):
    payload = json.loads(open(pipeline["eval"]).read())
    assert payload["matching"] == "identity"
    assert {"mota", "idf1", "ids", "fp", "fn"} <= set(payload["summary"])
    assert len(payload["per_sequence"]) == 2
    assert "occlusion" in payload
    plain = json.loads(open(pipeline["iou_eval"]).read())
    assert "occlusion" not in plain


def test_report_renders_labels_and_plots(pipeline, tmp_path, capsys):
    out = str(tmp_path / "table.txt")
    plots = str(tmp_path / "plots")
    seq_file = os.path.join(pipeline["data"],
                            load_manifest(pipeline["data"])["test"][0]["file"])
    rc = main(["report",
               "--input", "ours=" + pipeline["eval"],
               "--input", "iou=" + pipeline["iou_eval"],
               "--out", out, "--plots", plots,
               "--plot-sequence", seq_file,
               "--loss-log", "ours=" + pipeline["log"]])
    assert rc == 0
    table = open(out).read()
    assert "ours" in table and "iou" in table and "MOTA" in table
    assert table in capsys.readouterr().out
    assert os.path.exists(os.path.join(plots, "trajectories.png"))
    assert os.path.exists(os.path.join(plots, "learning_curves.png"))


def test_association_tracking_needs_a_checkpoint(pipeline, tmp_path, capsys):
    rc = main(["track", "--data", pipeline["data"],
               "--out", str(tmp_path / "t")])
    assert rc == 1
    assert "--checkpoint" in capsys.readouterr().err


def test_learned_baseline_needs_a_similarity_checkpoint(pipeline, tmp_path,
                                                        capsys):
    rc = main(["track", "--data", pipeline["data"], "--method", "learned",
               "--out", str(tmp_path / "t")])
    assert rc == 1
    assert "--similarity" in capsys.readouterr().err


def test_unknown_config_key_fails_cleanly(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"sim": {"num_particles": 2}, "typo": 1}))
    rc = main(["gen", "--config", str(config), "--out", str(tmp_path / "d")])
    assert rc == 1
    err = capsys.readouterr().err
    assert err.startswith("softtrack gen:") and "typo" in err


def test_missing_dataset_fails_cleanly(tmp_path, capsys):
    rc = main(["eval", "--data", str(tmp_path / "nope"),
               "--hyp", str(tmp_path / "nope"), "--out", str(tmp_path / "e")])
    assert rc == 1
    assert "softtrack eval:" in capsys.readouterr().err


def test_malformed_report_input_fails_cleanly(tmp_path, capsys):
    rc = main(["report", "--input", "no-equals-sign",
               "--out", str(tmp_path / "t.txt")])
    assert rc == 1
    assert "LABEL=eval.json" in capsys.readouterr().err


def test_argparse_rejections_exit_with_usage():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--config", "x.json", "--out", "d", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_out_dir_env_prefixes_relative_outputs(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("SOFTTRACK_OUT_DIR", str(tmp_path))
    rc = main(["gen", "--config", pipeline["config"], "--out", "env_data"])
    assert rc == 0
    assert os.path.exists(os.path.join(str(tmp_path), "env_data",
                                       MANIFEST_NAME))
    rc = main(["eval", "--data", pipeline["data"], "--hyp", pipeline["tracks"],
               "--out", "env_eval.json"])
    assert rc == 0
    assert os.path.exists(os.path.join(str(tmp_path), "env_eval.json"))


def test_checkpoint_round_trip_reproduces_tracks(pipeline, tmp_path):
    re_out = str(tmp_path / "replay")
    assert main(["track", "--config", pipeline["config"],
                 "--data", pipeline["data"], "--out", re_out,
                 "--method", "assoc",
                 "--checkpoint", pipeline["ckpt"]]) == 0
    for name in sorted(os.listdir(pipeline["tracks"])):
        first = open(os.path.join(pipeline["tracks"], name), "rb").read()
        second = open(os.path.join(re_out, name), "rb").read()
        assert first == second
