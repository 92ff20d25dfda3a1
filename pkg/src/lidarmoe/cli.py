"""Command-line entry point.

Subcommands: datagen, pretrain, cml, sms, probe, eval, corrupt,
route-stats, cosine-map, report. Global flags: --config <path>,
--seed <u64>, --out <dir>. Exit codes: 0 success, 1 usage error,
2 data/contract error. Results are written as CSV/JSON under --out.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import (AnalysisError, cosine_map, route_stats, route_bars_svg,
                       scatter_svg, write_cosine_csv, write_route_csv)
from .autodiff import NonFiniteError, ShapeError
from .datagen import corrupt as corrupt_cloud
from .dataio import (DataFormatError, DatasetManifest, ScanEntry, load_manifest,
                     read_lpcd, resolve, save_manifest, write_lpcd)
from .geometry import ContractError
from .losses import LossContractError
from .metrics import MetricError, MetricReport, compute_mce_mrr, compute_miou
from .moe import read_gate_csv
from .params import CheckpointError, load_checkpoint
from .pipeline import (PipelineError, RunConfig, evaluate_checkpoint,
                       export_predictions, generate_dataset, linear_probe,
                       load_dataset, probe_random_baseline, stage1_pretrain,
                       stage2_cml, stage3_sms, embed_cloud)
from .sensors import ConfigError

USAGE_ERROR = 1
DATA_ERROR = 2

_DATA_ERRORS = (ConfigError, ContractError, DataFormatError, PipelineError,
                MetricError, AnalysisError, LossContractError, CheckpointError,
                ShapeError, NonFiniteError, FileNotFoundError, KeyError,
                json.JSONDecodeError, ValueError, OSError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _run_config(doc: dict, args) -> RunConfig:
    keys = set(RunConfig().__dict__)
    cfg = RunConfig.from_json({k: v for k, v in doc.items() if k in keys})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_metric_csv(path, report: MetricReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("class,tp,fp,fn,iou\n")
        for c in range(report.tp.shape[0]):
            iou = report.iou[c]
            val = "" if np.isnan(iou) else repr(float(iou))
            fh.write(f"{c},{report.tp[c]},{report.fp[c]},{report.fn[c]},{val}\n")


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_datagen(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    generate_dataset(doc, out, args.seed if args.seed is not None else 0)
    manifest = load_manifest(out / "manifest.json")
    _write_json(out / "datagen_summary.json",
                {"train_scans": len(manifest.train), "val_scans": len(manifest.val)})
    return 0


def _cmd_pretrain(args):
    doc = _load_config(args.config)
    cfg = _run_config(doc, args)
    out = _out_dir(args)
    results = stage1_pretrain(cfg, out)
    _write_json(out / "stage1_results.json", results)
    return 0


def _cmd_cml(args):
    doc = _load_config(args.config)
    cfg = _run_config(doc, args)
    out = _out_dir(args)
    if "expert_ckpts" in doc:
        ckpts = doc["expert_ckpts"]
    elif "stage1_dir" in doc:
        d = Path(doc["stage1_dir"])
        ckpts = {k: str(d / f"stage1_{k}.ckpt") for k in ("range", "voxel", "point")}
    else:
        raise PipelineError("cml config needs expert_ckpts or stage1_dir")
    results = stage2_cml(cfg, ckpts, out)
    _write_json(out / "cml_results.json", results)
    return 0


def _cmd_sms(args):
    doc = _load_config(args.config)
    cfg = _run_config(doc, args)
    out = _out_dir(args)
    init = doc.get("init", {})
    results = stage3_sms(cfg, init, out)
    _write_json(out / "sms_results.json", results)
    return 0


def _cmd_probe(args):
    doc = _load_config(args.config)
    cfg = _run_config(doc, args)
    out = _out_dir(args)
    if "checkpoint" in doc:
        result = linear_probe(cfg, doc["checkpoint"], out,
                              representation=doc.get("representation"))
    elif doc.get("random_baseline"):
        result = probe_random_baseline(cfg, doc.get("representation", cfg.student), out)
    else:
        raise PipelineError("probe config needs checkpoint or random_baseline")
    _write_metric_csv(out / "probe_metrics.csv", result["report"])
    _write_json(out / "probe_summary.json",
                {"miou": result["report"].miou,
                 "backbone_intact": bool(result["backbone_intact"])})
    return 0


def _read_pairs_csv(path):
    preds, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "prediction,label":
            raise DataFormatError("pairs CSV must have header prediction,label")
        for line in fh:
            p, l = line.strip().split(",")
            preds.append(int(p))
            labels.append(int(l))
    return np.array(preds, np.int64), np.array(labels, np.int64)


def _cmd_eval(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    if "pairs_csv" in doc:
        preds, labels = _read_pairs_csv(doc["pairs_csv"])
        report = compute_miou(preds, labels, int(doc.get("num_classes", 6)))
        _write_metric_csv(out / "metrics.csv", report)
        _write_json(out / "eval_summary.json", {"miou": report.miou})
        return 0
    cfg = _run_config(doc, args)
    if "checkpoint" not in doc:
        raise PipelineError("eval config needs checkpoint or pairs_csv")
    reports = evaluate_checkpoint(cfg, doc["checkpoint"],
                                  split=doc.get("split", "val"))
    for name, report in reports.items():
        _write_metric_csv(out / f"metrics_{name}.csv", report)
    store, _ = load_checkpoint(doc["checkpoint"])
    data = load_dataset(cfg.dataset, cfg.superpoint_tolerance)
    export_predictions(store, cfg, data, out / "predictions.csv",
                       split=doc.get("split", "val"))
    _write_json(out / "eval_summary.json",
                {name: report.miou for name, report in reports.items()})
    return 0


def _cmd_corrupt(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    dataset = Path(doc["dataset"])
    kind = doc["kind"]
    severity = int(doc["severity"])
    split = doc.get("split", "val")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    manifest = load_manifest(dataset / "manifest.json")
    entries = manifest.val if split == "val" else manifest.train
    (out / "scans").mkdir(parents=True, exist_ok=True)
    new_entries = []
    for i, entry in enumerate(entries):
        cloud = read_lpcd(resolve(dataset, entry.scan))
        bad = corrupt_cloud(cloud, kind, severity, seed=seed + i)
        rel = f"scans/{split}_{i:03d}.lpcd"
        write_lpcd(out / rel, bad)
        new_entries.append(ScanEntry(scan=rel, camera=None))
    new_manifest = DatasetManifest(num_classes=manifest.num_classes)
    (new_manifest.val if split == "val" else new_manifest.train).extend(new_entries)
    save_manifest(out / "manifest.json", new_manifest)
    shutil.copy(dataset / "sensors.json", out / "sensors.json")
    _write_json(out / "corrupt_summary.json",
                {"kind": kind, "severity": severity, "scans": len(new_entries)})
    return 0


def _cmd_route_stats(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    scores = read_gate_csv(doc["gates_csv"])
    cloud = read_lpcd(doc["cloud"])
    axis = doc.get("axis", "beam")
    kwargs = {}
    if "distance_edges" in doc:
        kwargs["distance_edges"] = tuple(doc["distance_edges"])
    table = route_stats(scores, cloud, axis, **kwargs)
    write_route_csv(out / f"route_{axis}.csv", table)
    route_bars_svg(out / f"route_{axis}.svg", table, title=f"expert load by {axis}")
    load = table.global_load()
    _write_json(out / "route_summary.json", {
        "axis": axis,
        "global_load": load.tolist(),
        "non_degenerate": bool(np.all(load >= 0.05)),
    })
    return 0


def _cmd_cosine_map(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    query = int(doc["query_id"])
    cloud = read_lpcd(doc["cloud"]) if "cloud" in doc else None
    if "features_csv" in doc:
        feats = np.loadtxt(doc["features_csv"], delimiter=",", ndmin=2)
    else:
        cfg = _run_config(doc, args)
        store, meta = load_checkpoint(doc["checkpoint"])
        rep = doc.get("representation") or meta.get("student")
        if cloud is None:
            raise PipelineError("cosine-map from a checkpoint needs a cloud")
        data = load_dataset(cfg.dataset, cfg.superpoint_tolerance)
        feats = embed_cloud(store, cfg, data.sensor, cloud, rep, rep)
    sims, degenerate = cosine_map(feats, query)
    write_cosine_csv(out / "cosine_map.csv", sims, degenerate)
    if cloud is not None:
        scatter_svg(out / "cosine_map.svg", cloud.xyz[:, :2], sims,
                    title=f"cosine similarity vs point {query}")
    _write_json(out / "cosine_summary.json",
                {"query_id": query, "zero_norm_rows": int(degenerate.sum())})
    return 0


def _cmd_report(args):
    doc = _load_config(args.config)
    out = _out_dir(args)
    mce, mrr, per = compute_mce_mrr(doc["model_ious"], doc["baseline_ious"],
                                    float(doc["clean_iou"]))
    with open(out / "robustness.csv", "w", encoding="utf-8") as fh:
        fh.write("corruption,ce,rr\n")
        for name in sorted(per):
            fh.write(f"{name},{per[name]['ce']!r},{per[name]['rr']!r}\n")
    _write_json(out / "robustness_summary.json", {"mce": mce, "mrr": mrr})
    return 0


_COMMANDS = {
    "datagen": _cmd_datagen,
    "pretrain": _cmd_pretrain,
    "cml": _cmd_cml,
    "sms": _cmd_sms,
    "probe": _cmd_probe,
    "eval": _cmd_eval,
    "corrupt": _cmd_corrupt,
    "route-stats": _cmd_route_stats,
    "cosine-map": _cmd_cosine_map,
    "report": _cmd_report,
}


def build_parser() -> _Parser:
    parser = _Parser(prog="lidarmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command")
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    if args.command is None:
        parser.print_help(sys.stderr)
        return USAGE_ERROR
    try:
        return _COMMANDS[args.command](args)
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
