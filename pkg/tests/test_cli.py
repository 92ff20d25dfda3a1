"""Command-line contract: exit codes, output files, reproducibility."""

import json

import numpy as np
import pytest

from lidarmoe.cli import main
from lidarmoe.dataio import read_lpcd, write_lpcd
from lidarmoe.moe import GateScores, write_gate_csv
from lidarmoe.pointcloud import PointCloud


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_no_arguments_usage_exit_1(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_unknown_command_exit_1():
    assert main(["frobnicate"]) == 1


def test_bad_flag_exit_1():
    assert main(["eval", "--bogus"]) == 1


def test_missing_config_file_exit_2(tmp_path):
    assert main(["eval", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)]) == 2


def test_eval_fixture_perfect_predictions(tmp_path, capsys):
    pairs = tmp_path / "pairs.csv"
    rows = ["prediction,label"] + [f"{i % 3},{i % 3}" for i in range(60)]
    pairs.write_text("\n".join(rows) + "\n")
    cfg = write_json(tmp_path / "cfg.json",
                     {"pairs_csv": str(pairs), "num_classes": 3})
    out = tmp_path / "out"
    assert main(["eval", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "eval_summary.json").read_text())
    assert summary["miou"] == pytest.approx(100.0)
    lines = (out / "metrics.csv").read_text().strip().split("\n")
    assert lines[0] == "class,tp,fp,fn,iou"


def test_datagen_and_outputs_byte_identical(tmp_path):
    doc = {"n_train": 1, "n_val": 1, "azimuth_steps": 64, "range_w": 64}
    cfg = write_json(tmp_path / "gen.json", doc)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["datagen", "--config", cfg, "--seed", "5", "--out", str(a)]) == 0
    assert main(["datagen", "--config", cfg, "--seed", "5", "--out", str(b)]) == 0
    for rel in ("manifest.json", "scans/train_000.lpcd", "cams/val_000.npz",
                "datagen_summary.json"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_route_stats_one_hot_fixture(tmp_path):
    n = 20
    cloud = PointCloud(np.random.default_rng(0).uniform(1, 30, (n, 3)).astype(np.float32),
                       np.zeros(n), np.arange(n, dtype=np.int32) % 4,
                       np.zeros(n, np.int32))
    scan = tmp_path / "scan.lpcd"
    write_lpcd(scan, cloud)
    gates = np.zeros((n, 3), np.float32)
    gates[:, 2] = 1.0
    gates_csv = tmp_path / "gates.csv"
    write_gate_csv(gates_csv, GateScores(gates))
    cfg = write_json(tmp_path / "cfg.json",
                     {"gates_csv": str(gates_csv), "cloud": str(scan),
                      "axis": "beam"})
    out = tmp_path / "out"
    assert main(["route-stats", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "route_beam.csv").read_text().strip().split("\n")[1:]
    for row in rows:
        cols = row.split(",")
        assert float(cols[3]) == 0.0
        assert float(cols[4]) == 0.0
        assert float(cols[5]) == 1.0
    summary = json.loads((out / "route_summary.json").read_text())
    assert summary["non_degenerate"] is False
    assert (out / "route_beam.svg").exists()


def test_route_stats_gate_rows_validated(tmp_path):
    # row count mismatch between gates and cloud -> data error
    cloud = PointCloud(np.ones((5, 3), np.float32), np.zeros(5),
                       np.zeros(5, np.int32), np.zeros(5, np.int32))
    scan = tmp_path / "scan.lpcd"
    write_lpcd(scan, cloud)
    gates_csv = tmp_path / "gates.csv"
    write_gate_csv(gates_csv, GateScores(np.ones((3, 3), np.float32) / 3))
    cfg = write_json(tmp_path / "cfg.json",
                     {"gates_csv": str(gates_csv), "cloud": str(scan),
                      "axis": "beam"})
    assert main(["route-stats", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_cosine_map_from_features_csv(tmp_path):
    feats = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    fcsv = tmp_path / "feats.csv"
    np.savetxt(fcsv, feats, delimiter=",")
    cloud = PointCloud(np.arange(9, dtype=np.float32).reshape(3, 3) + 1,
                       np.zeros(3), np.zeros(3, np.int32), np.zeros(3, np.int32))
    scan = tmp_path / "scan.lpcd"
    write_lpcd(scan, cloud)
    cfg = write_json(tmp_path / "cfg.json",
                     {"features_csv": str(fcsv), "cloud": str(scan),
                      "query_id": 0})
    out = tmp_path / "out"
    assert main(["cosine-map", "--config", cfg, "--out", str(out)]) == 0
    rows = (out / "cosine_map.csv").read_text().strip().split("\n")
    assert rows[0] == "point_id,similarity,zero_norm"
    sims = [float(r.split(",")[1]) for r in rows[1:]]
    assert sims == pytest.approx([1.0, 0.0, -1.0])
    assert (out / "cosine_map.svg").exists()


def test_report_robustness(tmp_path):
    cfg = write_json(tmp_path / "cfg.json", {
        "clean_iou": 70.0,
        "model_ious": {"beam": [60.0, 50.0, 40.0]},
        "baseline_ious": {"beam": [50.0, 40.0, 30.0]},
    })
    out = tmp_path / "out"
    assert main(["report", "--config", cfg, "--out", str(out)]) == 0
    summary = json.loads((out / "robustness_summary.json").read_text())
    assert summary["mce"] == pytest.approx(100.0 * 150.0 / 180.0, abs=0.01)
    assert summary["mrr"] == pytest.approx(100.0 * 150.0 / 210.0, abs=0.01)
    rows = (out / "robustness.csv").read_text().strip().split("\n")
    assert rows[0] == "corruption,ce,rr"


def test_corrupt_command(tmp_path, tiny_dataset):
    cfg = write_json(tmp_path / "cfg.json",
                     {"dataset": str(tiny_dataset), "kind": "range-cut",
                      "severity": 3, "split": "val"})
    out = tmp_path / "corrupted"
    assert main(["corrupt", "--config", cfg, "--seed", "3", "--out", str(out)]) == 0
    bad = read_lpcd(out / "scans" / "val_000.lpcd")
    clean = read_lpcd(tiny_dataset / "scans" / "val_000.lpcd")
    assert bad.count < clean.count
    assert np.all(bad.depth() <= 20.0)
    assert (out / "sensors.json").exists()


def test_corrupt_unknown_kind_exit_2(tmp_path, tiny_dataset):
    cfg = write_json(tmp_path / "cfg.json",
                     {"dataset": str(tiny_dataset), "kind": "snowstorm",
                      "severity": 1})
    assert main(["corrupt", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_full_cli_training_chain(tmp_path, tiny_dataset):
    """datagen artifacts feed pretrain -> cml -> probe -> sms -> eval."""
    run_doc = {"dataset": str(tiny_dataset), "seed": 2, "epochs": 1,
               "embed_dim": 8, "centroid_count": 8, "knn_k": 4,
               "probe_epochs": 2, "sms_epochs": 1}
    cfg = write_json(tmp_path / "run.json", run_doc)
    s1 = tmp_path / "s1"
    assert main(["pretrain", "--config", cfg, "--out", str(s1)]) == 0
    assert (s1 / "stage1_range.ckpt").exists()

    cml_doc = dict(run_doc, stage1_dir=str(s1))
    cml_cfg = write_json(tmp_path / "cml.json", cml_doc)
    cml_out = tmp_path / "cml"
    assert main(["cml", "--config", cml_cfg, "--out", str(cml_out)]) == 0
    results = json.loads((cml_out / "cml_results.json").read_text())
    assert results["experts_frozen"]

    probe_doc = dict(run_doc, checkpoint=str(cml_out / "cml_student.ckpt"))
    probe_cfg = write_json(tmp_path / "probe.json", probe_doc)
    probe_out = tmp_path / "probe"
    assert main(["probe", "--config", probe_cfg, "--out", str(probe_out)]) == 0
    summary = json.loads((probe_out / "probe_summary.json").read_text())
    assert summary["backbone_intact"] is True

    sms_doc = dict(run_doc, init={
        "voxel": str(cml_out / "cml_student.ckpt"),
        "range": str(s1 / "stage1_range.ckpt"),
        "point": str(s1 / "stage1_point.ckpt"),
    })
    sms_cfg = write_json(tmp_path / "sms.json", sms_doc)
    sms_out = tmp_path / "sms"
    assert main(["sms", "--config", sms_cfg, "--out", str(sms_out)]) == 0

    eval_doc = dict(run_doc, checkpoint=str(sms_out / "sms_model.ckpt"))
    eval_cfg = write_json(tmp_path / "eval.json", eval_doc)
    eval_out = tmp_path / "eval"
    assert main(["eval", "--config", eval_cfg, "--out", str(eval_out)]) == 0
    assert (eval_out / "metrics_fused.csv").exists()
    assert (eval_out / "predictions.csv").exists()
    summary = json.loads((eval_out / "eval_summary.json").read_text())
    assert np.isfinite(summary["fused"])

    cm_doc = dict(run_doc, checkpoint=str(cml_out / "cml_student.ckpt"),
                  cloud=str(tiny_dataset / "scans" / "val_000.lpcd"),
                  query_id=0)
    cm_cfg = write_json(tmp_path / "cm.json", cm_doc)
    cm_out = tmp_path / "cm"
    assert main(["cosine-map", "--config", cm_cfg, "--out", str(cm_out)]) == 0
    rows = (cm_out / "cosine_map.csv").read_text().strip().split("\n")
    assert float(rows[1].split(",")[1]) == pytest.approx(1.0)
