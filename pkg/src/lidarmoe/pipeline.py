"""Three-stage training orchestration plus linear probing and evaluation.

Stage 1 trains each representation encoder against the frozen teacher
with the grouped contrastive loss. Stage 2 freezes the three stage-1
experts, fuses their aligned features through the noisy gate, and
distills the fusion into a single student network. Stage 3 fine-tunes all
three backbones with fresh logit heads under the supervised composite,
fusing logits through a train-only noisy gate.

Every run is a pure function of (config, dataset, seed): augmentation,
gate noise, and initialization seeds derive deterministically from the
run seed, so identical runs produce bit-identical checkpoints and logs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .datagen import (NUM_CLASSES, SceneConfig, build_scene,
                      render_camera, simulate_lidar)
from .datagen import augment as augment_cloud
from .dataio import (DatasetManifest, ScanEntry, TrainingLog, load_manifest,
                     read_camera_npz, read_lpcd, resolve, save_manifest,
                     write_camera_npz, write_lpcd)
from .encoders import (build_point_embed, build_range_embed, build_voxel_embed,
                       init_encoder_params, init_teacher_params, linear,
                       point_grouping, teacher_features, trunk_width,
                       voxel_neighbor_pairs)
from .geometry import build_superpoints, project_labels, project_to_range, voxelize
from .losses import LossConfig, build_cross_entropy, build_info_nce, build_sms_total
from .metrics import compute_miou
from .moe import GateScores, build_moe, init_moe_params, write_gate_csv
from .optim import AdamW
from .params import ParameterStore, add_linear, load_checkpoint, save_checkpoint
from .pointcloud import PointCloud
from .sensors import CameraModel, SensorModel

REPRESENTATIONS = ("range", "voxel", "point")


class PipelineError(ValueError):
    """Invalid pipeline configuration or dataset."""


@dataclass(frozen=True)
class RunConfig:
    """Run settings shared by the stage commands; JSON keys match fields."""

    dataset: str = ""
    seed: int = 0
    epochs: int = 50
    batch_size: int = 1
    embed_dim: int = 64
    num_classes: int = NUM_CLASSES
    temperature: float = 0.07
    contrastive_denominator: str = "all"
    lr_stage1: float = 0.01
    lr_cml: float = 0.001
    lr_sms_backbone: float = 0.001
    lr_sms_other: float = 0.01
    student: str = "voxel"
    student_init: str = "stage1"
    augment: bool = True
    sms_augment: bool = True
    voxel_size: tuple = (1.5, 1.5, 1.5)
    centroid_count: int = 48
    knn_k: int = 12
    superpoint_tolerance: float = 0.1
    probe_epochs: int = 40
    probe_lr: float = 0.05
    sms_epochs: int = 30

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise PipelineError("epochs must be >= 0 and batch_size >= 1")
        if self.student not in REPRESENTATIONS:
            raise PipelineError(f"unknown student representation: {self.student}")
        if self.student_init not in ("stage1", "random"):
            raise PipelineError("student_init must be stage1|random")
        if self.contrastive_denominator not in ("all", "exclude_positive"):
            raise PipelineError("bad contrastive_denominator")

    def to_json(self) -> dict:
        doc = dict(self.__dict__)
        doc["voxel_size"] = list(self.voxel_size)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        kw = dict(doc)
        if "voxel_size" in kw:
            kw["voxel_size"] = tuple(kw["voxel_size"])
        return cls(**kw)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def _step_seed(*parts) -> int:
    h = hashlib.sha256(("/".join(str(p) for p in parts)).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little") >> 1


# ---------------------------------------------------------------------------
# dataset generation and loading
# ---------------------------------------------------------------------------

DEFAULT_DATASET_CONFIG = {
    "n_train": 5,
    "n_val": 2,
    "scene": SceneConfig().to_json(),
    "beam_count": 32,
    "azimuth_steps": 192,
    "fov_total_rad": float(np.deg2rad(40.0)),
    "fov_down_rad": float(np.deg2rad(25.0)),
    "max_range_m": 60.0,
    "range_h": 32,
    "range_w": 192,
    "cam_intrinsics": [[64.0, 0.0, 48.0], [0.0, 64.0, 32.0], [0.0, 0.0, 1.0]],
    "cam_extrinsics": [[0.0, -1.0, 0.0, 0.0],
                       [0.0, 0.0, -1.0, 0.2],
                       [1.0, 0.0, 0.0, 0.0],
                       [0.0, 0.0, 0.0, 1.0]],
    "cam_w": 96,
    "cam_h": 64,
    "num_classes": NUM_CLASSES,
    "superpixel_tile": 16,
}


def generate_dataset(doc: dict, out_dir, seed: int) -> Path:
    """Render scans + camera files and write manifest/sensor documents."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "cams").mkdir(parents=True, exist_ok=True)
    merged = dict(DEFAULT_DATASET_CONFIG)
    merged.update(doc or {})
    sensor = SensorModel.from_json(merged)
    camera = CameraModel.from_json(merged)
    scene_cfg = SceneConfig.from_json(merged["scene"])
    tile = int(merged["superpixel_tile"])

    manifest = DatasetManifest(num_classes=int(merged["num_classes"]))
    for split, count in (("train", int(merged["n_train"])),
                         ("val", int(merged["n_val"]))):
        for i in range(count):
            scene = build_scene(scene_cfg, _step_seed(seed, split, i))
            cloud = simulate_lidar(scene, sensor)
            image, superpixels = render_camera(scene, camera, tile)
            scan_rel = f"scans/{split}_{i:03d}.lpcd"
            cam_rel = f"cams/{split}_{i:03d}.npz"
            write_lpcd(out / scan_rel, cloud)
            write_camera_npz(out / cam_rel, image, superpixels)
            entry = ScanEntry(scan=scan_rel, camera=cam_rel)
            (manifest.train if split == "train" else manifest.val).append(entry)
    save_manifest(out / "manifest.json", manifest)
    with open(out / "sensors.json", "w", encoding="utf-8") as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


@dataclass
class LoadedScan:
    name: str
    cloud: PointCloud
    image: object = None
    superpixels: np.ndarray = None
    partition: object = None


@dataclass
class DatasetBundle:
    train: list
    val: list
    sensor: SensorModel
    camera: CameraModel
    num_classes: int
    tile: int


def load_dataset(dataset_dir, superpoint_tolerance=0.1) -> DatasetBundle:
    base = Path(dataset_dir)
    manifest = load_manifest(base / "manifest.json")
    with open(base / "sensors.json", "r", encoding="utf-8") as fh:
        sdoc = json.load(fh)
    sensor = SensorModel.from_json(sdoc)
    camera = CameraModel.from_json(sdoc)

    def load_split(entries):
        scans = []
        for e in entries:
            cloud = read_lpcd(resolve(base, e.scan))
            scan = LoadedScan(name=Path(e.scan).stem, cloud=cloud)
            if e.camera:
                image, superpixels = read_camera_npz(resolve(base, e.camera))
                scan.image = image
                scan.superpixels = superpixels
                scan.partition = build_superpoints(
                    cloud, camera, superpixels, image.depth,
                    tolerance=superpoint_tolerance)
            scans.append(scan)
        return scans

    return DatasetBundle(load_split(manifest.train), load_split(manifest.val),
                         sensor, camera, manifest.num_classes,
                         int(sdoc.get("superpixel_tile", 16)))


# ---------------------------------------------------------------------------
# representation views
# ---------------------------------------------------------------------------

@dataclass
class ReprView:
    """One representation of one (possibly augmented) cloud: the named
    graph inputs plus the per-point row index into the encoder output."""

    kind: str
    ns: str
    inputs: dict
    gather: np.ndarray | None
    mapping: object


def make_view(kind, cloud, sensor, config: RunConfig, ns) -> ReprView:
    if kind == "range":
        ri = project_to_range(cloud, sensor)
        return ReprView(kind, ns, {f"{ns}.image": ri.features},
                        ri.point_cell_ids(), ri)
    if kind == "voxel":
        vg = voxelize(cloud, config.voxel_size)
        pairs = voxel_neighbor_pairs(vg)
        return ReprView(kind, ns, {f"{ns}.feats": vg.features, f"{ns}.pairs": pairs},
                        vg.point_voxel, vg)
    grouping = point_grouping(cloud, config.centroid_count, config.knn_k)
    return ReprView(kind, ns, {f"{ns}.feats": cloud.features(),
                               f"{ns}.grouping": grouping}, None, grouping)


def build_view_output(ctx, view: ReprView, prefix, head="head"):
    """Encoder output in representation space (cells / voxels / points)."""
    if view.kind == "range":
        return build_range_embed(ctx, f"{view.ns}.image", prefix, head)
    if view.kind == "voxel":
        return build_voxel_embed(ctx, f"{view.ns}.feats", f"{view.ns}.pairs",
                                 prefix, head)
    return build_point_embed(ctx, f"{view.ns}.feats", f"{view.ns}.grouping",
                             prefix, head)


def build_view_aligned(ctx, view: ReprView, prefix, head="head"):
    out = build_view_output(ctx, view, prefix, head)
    if view.gather is not None:
        out = ad.gather_rows(out, view.gather)
    return out


def build_group_mean(feats_var, partition):
    keep = np.flatnonzero(partition.point_group >= 0)
    groups = partition.point_group[keep].astype(np.int64)
    return ad.segment_mean(ad.gather_rows(feats_var, keep), groups,
                           partition.count)


def _maybe_augment(cloud, config, *seed_parts):
    if not config.augment:
        return cloud
    return augment_cloud(cloud, _step_seed(config.seed, *seed_parts))


def _copy_prefixed(dst: ParameterStore, src: ParameterStore, src_prefix: str,
                   dst_prefix: str, skip_embedding_head=False,
                   trainable=True) -> None:
    dot = src_prefix + "." if src_prefix else ""
    for name in src.names():
        if not name.startswith(dot):
            continue
        short = name[len(dot):]
        if skip_embedding_head and short.startswith("head."):
            continue
        dst.add(f"{dst_prefix}.{short}" if dst_prefix else short,
                src.get(name).copy(), trainable)


def _accumulate(batch_grads: list) -> dict:
    total = {}
    for grads in batch_grads:
        for name, g in grads.items():
            acc = total.get(name)
            total[name] = g.astype(np.float64) if acc is None else acc + g
    return {n: (g / len(batch_grads)).astype(np.float32) for n, g in total.items()}


def _train_epochs(config, scans, step_fn, optimizer, log, stage_name):
    """Shared loop: per epoch, per batch, accumulate grads and step.

    ``step_fn(scan_index, scan, epoch) -> (loss, grads) | None`` (None
    skips the scan). Returns per-epoch mean losses and the skip count.
    """
    epoch_losses = []
    skipped = 0
    step = 0
    for epoch in range(config.epochs):
        losses = []
        batch = []
        pending = []
        for idx, scan in enumerate(scans):
            result = step_fn(idx, scan, epoch)
            if result is None:
                if epoch == 0:
                    skipped += 1
                continue
            loss, grads = result
            losses.append(loss)
            pending.append(grads)
            if len(pending) >= config.batch_size:
                optimizer.step(_accumulate(pending))
                pending = []
            if log is not None:
                log.append(step, stage_name, "loss", loss)
            step += 1
        if pending:
            optimizer.step(_accumulate(pending))
        mean = float(np.mean(losses)) if losses else float("nan")
        epoch_losses.append(mean)
        if log is not None:
            log.append(step, stage_name, "epoch_loss", mean)
    return epoch_losses, skipped


# ---------------------------------------------------------------------------
# stage 1: image-to-LiDAR pretraining
# ---------------------------------------------------------------------------

def init_backbone_store(kind, config: RunConfig, seed_tag) -> ParameterStore:
    store = ParameterStore()
    rng = np.random.default_rng(_step_seed(config.seed, "init", seed_tag, kind))
    init_encoder_params(store, kind, config.embed_dim, rng, prefix=kind)
    return store


def teacher_store(config: RunConfig, num_classes) -> ParameterStore:
    store = ParameterStore()
    init_teacher_params(store, num_classes, config.embed_dim,
                        _step_seed(config.seed, "teacher"))
    return store


def stage1_pretrain(config: RunConfig, out_dir, representations=REPRESENTATIONS):
    """Train each representation encoder against the frozen teacher.

    Writes one checkpoint and one loss log per representation; returns
    {representation: {checkpoint, epoch_losses, skipped}}.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset, config.superpoint_tolerance)
    teacher = teacher_store(config, data.num_classes)

    targets = {}
    for scan in data.train:
        if scan.partition is None:
            raise PipelineError(f"train scan {scan.name} lacks camera pairing")
        if scan.partition.count >= 2:
            q = teacher_features(scan.image, teacher, scan.superpixels)
            targets[scan.name] = q[scan.partition.superpixel_of]

    results = {}
    for kind in representations:
        store = init_backbone_store(kind, config, "stage1")
        total_steps = max(1, config.epochs * len(data.train))
        optimizer = AdamW(store, config.lr_stage1, total_steps)

        def step_fn(idx, scan, epoch):
            if scan.name not in targets:
                return None
            view_cloud = _maybe_augment(scan.cloud, config, "s1", kind, epoch, idx)
            view = make_view(kind, view_cloud, data.sensor, config, "x")

            def build(ctx):
                feats = build_view_aligned(ctx, view, kind)
                k = build_group_mean(feats, scan.partition)
                loss = build_info_nce(k, ad.as_var(targets[scan.name]),
                                      config.temperature,
                                      config.contrastive_denominator)
                return {"loss": loss}

            outs, grads = ad.backward(Graph(build), store, view.inputs,
                                      seed=_step_seed(config.seed, "s1", kind, epoch, idx))
            return float(outs["loss"]), grads

        with TrainingLog(out / f"stage1_{kind}_log.csv") as log:
            epoch_losses, skipped = _train_epochs(config, data.train, step_fn,
                                                  optimizer, log, f"stage1-{kind}")
        ckpt = out / f"stage1_{kind}.ckpt"
        save_checkpoint(ckpt, store, {"stage": f"stage1-{kind}",
                                      "config_digest": config.digest(),
                                      "seed": config.seed})
        results[kind] = {"checkpoint": str(ckpt), "epoch_losses": epoch_losses,
                         "skipped": skipped}
    return results


# ---------------------------------------------------------------------------
# stage 2: contrastive mixture learning
# ---------------------------------------------------------------------------

def stage2_cml(config: RunConfig, expert_ckpts: dict, out_dir):
    """Distill the gated expert fusion into a single student network.

    ``expert_ckpts`` maps each representation to its stage-1 checkpoint.
    Experts stay frozen; the student (per ``config.student``) warm-starts
    from its own stage-1 checkpoint. Writes the student+gate checkpoint,
    a loss log, and per-scan gate-score CSVs from the final epoch.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset, config.superpoint_tolerance)

    store = ParameterStore()
    for kind in REPRESENTATIONS:
        expert, _ = load_checkpoint(expert_ckpts[kind])
        _copy_prefixed(store, expert, kind, f"expert.{kind}", trainable=False)
    if config.student_init == "stage1":
        student_src, _ = load_checkpoint(expert_ckpts[config.student])
    else:
        student_src = init_backbone_store(config.student, config, "cml-student")
    _copy_prefixed(store, student_src, config.student,
                   f"student.{config.student}", trainable=True)
    init_moe_params(store, config.embed_dim,
                    np.random.default_rng(_step_seed(config.seed, "init", "moe")))

    usable = [s for s in data.train
              if s.partition is not None and s.partition.count >= 2]
    total_steps = max(1, config.epochs * len(data.train))
    optimizer = AdamW(store, config.lr_cml, total_steps)
    final_gates = {}

    def step_fn(idx, scan, epoch):
        if scan.partition is None or scan.partition.count < 2:
            return None
        views = {}
        for kind in REPRESENTATIONS:
            cloud = _maybe_augment(scan.cloud, config, "cml", kind, epoch, idx)
            views[kind] = make_view(kind, cloud, data.sensor, config, kind)
        student_cloud = _maybe_augment(scan.cloud, config, "cml", "student", epoch, idx)
        views["student"] = make_view(config.student, student_cloud, data.sensor,
                                     config, "student")
        inputs = {}
        for v in views.values():
            inputs.update(v.inputs)

        def build(ctx):
            aligned = {k: build_view_aligned(ctx, views[k], f"expert.{k}")
                       for k in REPRESENTATIONS}
            fused, gates = build_moe(ctx, aligned["range"], aligned["voxel"],
                                     aligned["point"], noise_active=True,
                                     noise_tag="cml")
            k_moe = build_group_mean(fused, scan.partition)
            student_feats = build_view_aligned(ctx, views["student"],
                                               f"student.{config.student}")
            k_student = build_group_mean(student_feats, scan.partition)
            loss = build_info_nce(k_student, k_moe, config.temperature,
                                  config.contrastive_denominator)
            return {"loss": loss, "gates": gates}

        outs, grads = ad.backward(Graph(build), store, inputs,
                                  seed=_step_seed(config.seed, "cml", epoch, idx))
        if epoch == config.epochs - 1:
            final_gates[scan.name] = GateScores(outs["gates"])
        return float(outs["loss"]), grads

    with TrainingLog(out / "cml_log.csv") as log:
        epoch_losses, skipped = _train_epochs(config, data.train, step_fn,
                                              optimizer, log, "cml")
    for name, gates in sorted(final_gates.items()):
        write_gate_csv(out / f"cml_gates_{name}.csv", gates)

    export = ParameterStore()
    _copy_prefixed(export, store, f"student.{config.student}", config.student)
    _copy_prefixed(export, store, "moe", "moe")
    ckpt = out / "cml_student.ckpt"
    save_checkpoint(ckpt, export, {"stage": "cml",
                                   "student": config.student,
                                   "config_digest": config.digest(),
                                   "seed": config.seed})
    frozen_ok = True
    for k in REPRESENTATIONS:
        src, _ = load_checkpoint(expert_ckpts[k])
        frozen_ok &= all(np.array_equal(store.get(f"expert.{n}"), src.get(n))
                         for n in src.names())
    return {"checkpoint": str(ckpt), "epoch_losses": epoch_losses,
            "skipped": skipped, "experts_frozen": frozen_ok,
            "usable_scans": len(usable)}


# ---------------------------------------------------------------------------
# stage 3: semantic mixture supervision
# ---------------------------------------------------------------------------

def _sms_store(config: RunConfig, init_ckpts: dict, num_classes) -> ParameterStore:
    store = ParameterStore()
    for kind in REPRESENTATIONS:
        src_path = init_ckpts.get(kind)
        if src_path:
            src, _ = load_checkpoint(src_path)
            if not any(n.startswith(kind + ".") for n in src.names()):
                raise PipelineError(
                    f"checkpoint {src_path} has no {kind} backbone")
            _copy_prefixed(store, src, kind, kind, skip_embedding_head=True,
                           trainable=True)
        else:
            fresh = init_backbone_store(kind, config, "sms")
            _copy_prefixed(store, fresh, kind, kind, skip_embedding_head=True,
                           trainable=True)
        rng = np.random.default_rng(_step_seed(config.seed, "init", "sms-head", kind))
        add_linear(store, f"{kind}.logit_head", trunk_width(kind), num_classes, rng)
    init_moe_params(store, num_classes,
                    np.random.default_rng(_step_seed(config.seed, "init", "sms-moe")))
    return store


def _is_backbone_param(name: str) -> bool:
    kind = name.split(".", 1)[0]
    return kind in REPRESENTATIONS and ".logit_head." not in name


def _sms_forward_build(ctx, views):
    logits = {}
    for kind in REPRESENTATIONS:
        logits[kind] = build_view_output(ctx, views[kind], kind, head="logit_head")
    aligned = {k: (logits[k] if views[k].gather is None
                   else ad.gather_rows(logits[k], views[k].gather))
               for k in REPRESENTATIONS}
    fused, gates = build_moe(ctx, aligned["range"], aligned["voxel"],
                             aligned["point"], noise_active=ctx.train_mode,
                             noise_tag="sms")
    return logits, aligned, fused, gates


def stage3_sms(config: RunConfig, init_ckpts: dict, out_dir,
               loss_config: LossConfig = None):
    """Fine-tune all three backbones with supervised logit fusion.

    ``init_ckpts`` maps representation to a warm-start checkpoint (stage-1
    or distilled-student); a missing entry means random init. Backbones
    use ``lr_sms_backbone``; logit heads and the gate use ``lr_sms_other``.
    Validation runs after every epoch with the noise switch off.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset, config.superpoint_tolerance)
    labeled = [s for s in data.train if np.any(s.cloud.label >= 0)]
    if not labeled:
        raise PipelineError("no labeled training scans")
    frac = load_manifest(Path(config.dataset) / "manifest.json").annotation_fraction
    if frac < 1.0:
        labeled = labeled[:max(1, int(np.ceil(frac * len(labeled))))]
    cfg = replace(config, epochs=config.sms_epochs, augment=config.sms_augment)
    loss_config = loss_config or LossConfig(temperature=config.temperature,
                                            denominator=config.contrastive_denominator)

    store = _sms_store(config, init_ckpts, data.num_classes)
    steps = max(1, cfg.epochs * len(labeled))
    backbone_names = {n for n in store.trainable_names() if _is_backbone_param(n)}
    opt_backbone = AdamW(store, config.lr_sms_backbone, steps)
    opt_other = AdamW(store, config.lr_sms_other, steps)

    def make_views(cloud):
        return {k: make_view(k, cloud, data.sensor, cfg, k)
                for k in REPRESENTATIONS}

    val_history = []

    def step_fn(idx, scan, epoch):
        cloud = _maybe_augment(scan.cloud, cfg, "sms", epoch, idx)
        views = make_views(cloud)
        inputs = {}
        for v in views.values():
            inputs.update(v.inputs)
        labels = {
            "fused": cloud.label,
            "point": cloud.label,
            "range": project_labels(cloud, views["range"].mapping),
            "voxel": project_labels(cloud, views["voxel"].mapping),
        }

        def build(ctx):
            logits, aligned, fused, gates = _sms_forward_build(ctx, views)
            total, breakdown = build_sms_total(
                {"fused": fused, "range": logits["range"],
                 "voxel": logits["voxel"], "point": aligned["point"]},
                labels, loss_config)
            out_nodes = {"loss": total}
            out_nodes.update(breakdown)
            return out_nodes

        outs, grads = ad.backward(Graph(build), store, inputs, train_mode=True,
                                  seed=_step_seed(cfg.seed, "sms", epoch, idx))
        gb = {n: g for n, g in grads.items() if n in backbone_names}
        go = {n: g for n, g in grads.items() if n not in backbone_names}
        if gb:
            opt_backbone.step(gb)
        if go:
            opt_other.step(go)
        terms = {k: float(v) for k, v in outs.items() if k != "loss"}
        return float(outs["loss"]), terms

    epoch_losses = []
    with TrainingLog(out / "sms_log.csv") as log:
        step = 0
        for epoch in range(cfg.epochs):
            losses = []
            for idx, scan in enumerate(labeled):
                loss, terms = step_fn(idx, scan, epoch)
                losses.append(loss)
                log.append(step, "sms", "loss", loss)
                for term, value in sorted(terms.items()):
                    log.append(step, "sms", term, value)
                step += 1
            epoch_losses.append(float(np.mean(losses)))
            log.append(step, "sms", "epoch_loss", epoch_losses[-1])
            val = evaluate_store(store, config, data, split="val")
            val_history.append({k: r.miou for k, r in val.items()})
            for k, r in val.items():
                log.append(step, "sms", f"val_miou_{k}", r.miou)

    ckpt = out / "sms_model.ckpt"
    save_checkpoint(ckpt, store, {"stage": "sms",
                                  "config_digest": config.digest(),
                                  "seed": config.seed})
    final = evaluate_store(store, config, data, split="val")
    return {"checkpoint": str(ckpt), "epoch_losses": epoch_losses,
            "val_history": val_history,
            "val_miou": {k: r.miou for k, r in final.items()}}


def _forward_predictions(store, config, data, scan, num_classes, seed=0):
    """Inference forward (no noise); per-point predictions per head."""
    views = {k: make_view(k, scan.cloud, data.sensor, config, k)
             for k in REPRESENTATIONS}
    inputs = {}
    for v in views.values():
        inputs.update(v.inputs)

    def build(ctx):
        logits, aligned, fused, gates = _sms_forward_build(ctx, views)
        return {"fused": fused, "gates": gates,
                **{f"single_{k}": aligned[k] for k in REPRESENTATIONS}}

    outs = ad.evaluate(Graph(build), store, inputs, train_mode=False, seed=seed)
    preds = {"fused": np.argmax(outs["fused"], axis=1)}
    for k in REPRESENTATIONS:
        preds[k] = np.argmax(outs[f"single_{k}"], axis=1)
    return preds, GateScores(outs["gates"])


def evaluate_store(store, config: RunConfig, data: DatasetBundle, split="val"):
    """Per-class IoU reports for the fused head and each single head."""
    scans = data.val if split == "val" else data.train
    if not scans:
        raise PipelineError(f"empty split: {split}")
    all_preds = {k: [] for k in ("fused",) + REPRESENTATIONS}
    all_labels = []
    for scan in scans:
        preds, _ = _forward_predictions(store, config, data, scan,
                                        data.num_classes)
        for k in all_preds:
            all_preds[k].append(preds[k])
        all_labels.append(scan.cloud.label)
    labels = np.concatenate(all_labels)
    return {k: compute_miou(np.concatenate(v), labels, data.num_classes)
            for k, v in all_preds.items()}


def evaluate_checkpoint(config: RunConfig, ckpt_path, split="val"):
    store, _ = load_checkpoint(ckpt_path)
    data = load_dataset(config.dataset, config.superpoint_tolerance)
    return evaluate_store(store, config, data, split=split)


def export_predictions(store, config: RunConfig, data: DatasetBundle, path,
                       split="val") -> None:
    scans = data.val if split == "val" else data.train
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("scan,point_id,prediction,label\n")
        for scan in scans:
            preds, _ = _forward_predictions(store, config, data, scan,
                                            data.num_classes)
            for i, (p, l) in enumerate(zip(preds["fused"].tolist(),
                                           scan.cloud.label.tolist())):
                fh.write(f"{scan.name},{i},{p},{l}\n")


# ---------------------------------------------------------------------------
# linear probing
# ---------------------------------------------------------------------------

def embed_cloud(store, config, sensor, cloud, kind, prefix):
    """Frozen-backbone per-point embeddings of one cloud."""
    view = make_view(kind, cloud, sensor, config, "x")
    graph = Graph(lambda ctx: {"out": build_view_aligned(ctx, view, prefix)})
    return ad.evaluate(graph, store, view.inputs)["out"]


def linear_probe(config: RunConfig, ckpt_path, out_dir, representation=None):
    """Train a linear head on frozen per-point embeddings; report val mIoU.

    ``ckpt_path`` may be a stage-1 or distilled-student checkpoint; pass
    ``representation`` to pick a backbone when several are present, or
    None to use the checkpoint's student/stage metadata.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store, meta = load_checkpoint(ckpt_path)
    kind = representation or meta.get("student") \
        or meta.get("stage", "").replace("stage1-", "")
    if kind not in REPRESENTATIONS:
        raise PipelineError(f"cannot infer representation from {ckpt_path}")
    store.freeze_all()
    before = store.copy()
    data = load_dataset(config.dataset, config.superpoint_tolerance)
    return _probe_on_store(config, store, kind, kind, data, out, before=before)


def probe_random_baseline(config: RunConfig, representation, out_dir):
    """Linear probe of a freshly initialized frozen backbone."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_dataset(config.dataset, config.superpoint_tolerance)
    store = init_backbone_store(representation, config, "probe-baseline")
    store.freeze_all()
    return _probe_on_store(config, store, representation, representation,
                           data, out)


def _probe_on_store(config, store, kind, prefix, data, out, before=None):
    train_embeds, train_labels = [], []
    for scan in data.train:
        train_embeds.append(embed_cloud(store, config, data.sensor,
                                        scan.cloud, kind, prefix))
        train_labels.append(scan.cloud.label)
    probe = ParameterStore()
    add_linear(probe, "probe", config.embed_dim, data.num_classes,
               np.random.default_rng(_step_seed(config.seed, "probe-init")))
    steps = max(1, config.probe_epochs * len(train_embeds))
    optimizer = AdamW(probe, config.probe_lr, steps)

    def build_for(emb, labels):
        def build(ctx):
            logits = linear(ctx, ctx.input("emb"), "probe")
            return {"loss": build_cross_entropy(logits, labels)}
        return build

    with TrainingLog(out / f"probe_{kind}_log.csv") as log:
        step = 0
        for epoch in range(config.probe_epochs):
            for emb, labels in zip(train_embeds, train_labels):
                outs, grads = ad.backward(Graph(build_for(emb, labels)), probe,
                                          {"emb": emb})
                optimizer.step(grads)
                log.append(step, "probe", "loss", float(outs["loss"]))
                step += 1

    preds, labels = [], []
    for scan in data.val:
        emb = embed_cloud(store, config, data.sensor, scan.cloud, kind, prefix)
        logits = emb @ probe.get("probe.w") + probe.get("probe.b")
        preds.append(np.argmax(logits, axis=1))
        labels.append(scan.cloud.label)
    report = compute_miou(np.concatenate(preds), np.concatenate(labels),
                          data.num_classes)
    backbone_intact = before is None or store.state_equal(before)
    return {"report": report, "probe": probe, "backbone_intact": backbone_intact}
