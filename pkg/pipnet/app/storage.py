"""
Everything that touches the filesystem: points files, dataset manifests,
checkpoints, reports and overlay images.
"""
import csv
import hashlib
import json
import logging
from dataclasses import replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel

from . import __version__
from .data import Sample, load_pts
from .exceptions import CheckpointError
from .landmark_codec import LandmarkSet, NeighborTable
from .networks import NetworkGraph, build_model
from .schemas import (
    CheckpointManifest,
    DatasetManifest,
    ManifestRecord,
    RunConfig,
    RunManifest,
    TensorEntry,
    TrainReport,
)

logger = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f4")
OVERLAY_SCALE = 4
GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 0)


# --- points files and datasets ---

def write_pts(path, lm: LandmarkSet) -> Path:
    """
    Writes landmarks in the points format. Coordinates use the shortest
    representation that parses back to the same float.
    """
    path = Path(path)
    lines = ["version: 1", f"n_points: {lm.N}", "{"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in lm.points]
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _write_png(path: Path, image: np.ndarray) -> None:
    Image.fromarray(np.uint8(np.round(np.clip(image[0], 0.0, 1.0) * 255))).save(path)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return (np.asarray(img.convert("L"), dtype=np.float32) / 255.0)[None]


def write_dataset(samples: Sequence[Sample], out_dir) -> Path:
    """
    Writes images (8-bit PNG), points files and a manifest.json listing them.
    Paths inside the manifest are relative to its directory.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "points").mkdir(parents=True, exist_ok=True)
    records = []
    for i, s in enumerate(samples):
        image_rel = f"images/{i:05d}.png"
        points_rel = f"points/{i:05d}.pts"
        _write_png(out_dir / image_rel, s.image)
        write_pts(out_dir / points_rel, s.landmarks)
        records.append(ManifestRecord(
            image=image_rel, bbox=tuple(s.bbox), points=points_rel, domain_tag=s.domain_tag,
            is_labeled=s.is_labeled, attributes=list(s.attributes),
        ))
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(DatasetManifest(records=records).model_dump_json(indent=2))
    logger.info(f"Wrote {len(records)} samples to {out_dir}")
    return manifest_path


def load_manifest(path) -> list[Sample]:
    """Loads every record of a dataset manifest."""
    path = Path(path)
    manifest = DatasetManifest.model_validate_json(path.read_text())
    root = path.parent
    return [
        Sample(
            image=_read_png(root / r.image),
            landmarks=load_pts(root / r.points),
            bbox=tuple(float(v) for v in r.bbox),
            domain_tag=r.domain_tag,
            is_labeled=r.is_labeled,
            attributes=tuple(r.attributes),
        )
        for r in manifest.records
    ]


def write_pseudo_labels(samples: Sequence[Sample], out_dir) -> Path:
    """Dumps one round of pseudo-labeled samples as a dataset for inspection."""
    return write_dataset([replace(s, is_labeled=False) for s in samples], out_dir)


# --- checkpoints ---

def _checkpoint_paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def save_checkpoint(net: NetworkGraph, prefix) -> Path:
    """
    Writes `<prefix>.json` (manifest) and `<prefix>.bin` (little-endian fp32
    parameters in manifest order).
    """
    if net.head_kind is None:
        raise CheckpointError("only networks with a head attached can be saved")
    manifest_path, blob_path = _checkpoint_paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(blob_path, "wb") as blob:
        for name, p in net.named_parameters().items():
            raw = np.ascontiguousarray(p.data, dtype=BLOB_DTYPE).tobytes()
            blob.write(raw)
            entries.append(TensorEntry(name=name, shape=list(p.shape), offset=offset, nbytes=len(raw)))
            offset += len(raw)
    manifest = CheckpointManifest(
        backbone=net.backbone_cfg,
        head_kind=net.head_kind,
        head=net.head_cfg,
        map_stride=net.map_stride,
        with_aux=net.with_aux,
        neighbor_table=net.neighbor_table.tolist() if net.neighbor_table is not None else None,
        tensors=entries,
    )
    manifest_path.write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Saved checkpoint {manifest_path} ({len(entries)} tensors, {offset} bytes)")
    return manifest_path


def load_checkpoint(prefix) -> NetworkGraph:
    """Rebuilds the network described by the manifest and fills in the stored parameters."""
    manifest_path, blob_path = _checkpoint_paths(prefix)
    if not manifest_path.exists() or not blob_path.exists():
        raise CheckpointError(f"checkpoint {prefix} is incomplete: need {manifest_path.name} and {blob_path.name}")
    try:
        manifest = CheckpointManifest.model_validate_json(manifest_path.read_text())
    except ValueError as e:
        raise CheckpointError(f"invalid checkpoint manifest {manifest_path}: {e}") from e
    blob = blob_path.read_bytes()

    table = NeighborTable(np.asarray(manifest.neighbor_table)) if manifest.neighbor_table else None
    net = build_model(manifest.backbone, manifest.head_kind, manifest.head, seed=0, table=table,
                      map_stride=manifest.map_stride, with_aux=manifest.with_aux)
    params = net.named_parameters()
    if [e.name for e in manifest.tensors] != list(params):
        raise CheckpointError("checkpoint tensor names do not match the network layout")
    for entry in manifest.tensors:
        p = params[entry.name]
        if tuple(entry.shape) != p.shape:
            raise CheckpointError(f"tensor {entry.name}: stored shape {entry.shape} != network shape {p.shape}")
        if entry.offset + entry.nbytes > len(blob):
            raise CheckpointError(f"tensor {entry.name} extends past the end of {blob_path.name}")
        values = np.frombuffer(blob, dtype=BLOB_DTYPE, count=entry.nbytes // BLOB_DTYPE.itemsize, offset=entry.offset)
        p.data[...] = values.reshape(p.shape)
    logger.info(f"Loaded checkpoint {manifest_path}")
    return net


# --- reports ---

def write_json(model: BaseModel, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model.model_dump_json(indent=2))
    return path


TRAIN_CSV_FIELDS = ["round", "task", "epoch", "L", "L_S", "L_O", "L_N", "val_nme", "seconds"]


def write_train_csv(reports: Iterable[TrainReport], path) -> Path:
    """One row per epoch; STC rounds append their own rows with round/task set."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAIN_CSV_FIELDS)
        for report in reports:
            for r in report.records:
                writer.writerow([
                    r.round, r.task.value, r.epoch, repr(r.loss), repr(r.loss_score), repr(r.loss_offset),
                    repr(r.loss_neighbor), "" if r.val_nme is None else repr(r.val_nme), repr(r.seconds),
                ])
    return path


def write_per_landmark_csv(errors: Sequence[float], path, names: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["landmark", "name", "nme"])
        for i, e in enumerate(errors):
            writer.writerow([i, names[i] if names and i < len(names) else "", repr(float(e))])
    return path


def save_overlay(image: np.ndarray, path, gt: Optional[LandmarkSet] = None, pred: Optional[LandmarkSet] = None) -> Path:
    """Upscaled RGB render of the crop; ground truth green, predictions red."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    gray = Image.fromarray(np.uint8(np.round(np.clip(image[0], 0.0, 1.0) * 255)))
    canvas = gray.resize((gray.width * OVERLAY_SCALE, gray.height * OVERLAY_SCALE), Image.NEAREST).convert("RGB")
    draw = ImageDraw.Draw(canvas)
    for lm, color in ((gt, GT_COLOR), (pred, PRED_COLOR)):
        if lm is None:
            continue
        for x, y in lm.points * OVERLAY_SCALE:
            draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)
    canvas.save(path)
    return path


# --- run manifests ---

def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def write_run_manifest(out_dir, command: str, cfg: RunConfig) -> Path:
    manifest = RunManifest(command=command, seed=cfg.seed, config_hash=config_hash(cfg), version=__version__, config=cfg)
    return write_json(manifest, Path(out_dir) / "run_manifest.json")
