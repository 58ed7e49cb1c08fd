import csv
import json
import os

import numpy as np
import pytest
from PIL import Image

from app import landmark_codec as codec
from app.data import load_pts
from app.exceptions import CheckpointError
from app.networks import build_model, infer
from app.schemas import EpochRecord, HeadConfig, HeadKind, RunConfig, TaskId, TrainReport
from app.storage import (
    config_hash,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    save_overlay,
    write_dataset,
    write_per_landmark_csv,
    write_pseudo_labels,
    write_pts,
    write_run_manifest,
    write_train_csv,
)

from conftest import DATA_DIR


@pytest.fixture
def nrm_net(tiny_backbone):
    table = codec.NeighborTable([[(i + 1) % 16, (i + 2) % 16] for i in range(16)])
    cfg = HeadConfig(num_landmarks=16, num_neighbors=2, stride=8)
    return build_model(tiny_backbone, HeadKind.PIP_NRM, cfg, seed=5, table=table, with_aux=True)


def test_points_file_roundtrip(tmp_path):
    original = load_pts(os.path.join(DATA_DIR, "sample_68.pts"))
    again = load_pts(write_pts(tmp_path / "copy.pts", original))
    np.testing.assert_array_equal(again.points, original.points)


def test_points_file_keeps_full_precision(tmp_path):
    lm = codec.LandmarkSet(np.array([[0.1 + 0.2, 1 / 3], [12.345678901234, 7.0]]))
    np.testing.assert_array_equal(load_pts(write_pts(tmp_path / "p.pts", lm)).points, lm.points)


def test_dataset_manifest_roundtrip(tmp_path, face_samples):
    manifest = write_dataset(face_samples[:3], tmp_path / "ds")
    loaded = load_manifest(manifest)
    assert len(loaded) == 3
    for before, after in zip(face_samples[:3], loaded):
        np.testing.assert_array_equal(after.landmarks.points, before.landmarks.points)
        assert after.bbox == pytest.approx(before.bbox)
        assert after.domain_tag == before.domain_tag
        assert after.attributes == before.attributes
        # 8-bit quantization
        np.testing.assert_allclose(after.image, before.image, atol=0.5 / 255 + 1e-6)
    doc = json.loads(manifest.read_text())
    assert doc["records"][0]["image"] == "images/00000.png"


def test_checkpoint_roundtrip_is_bit_exact(tmp_path, nrm_net):
    save_checkpoint(nrm_net, tmp_path / "ckpt" / "model")
    restored = load_checkpoint(tmp_path / "ckpt" / "model")
    before, after = nrm_net.named_parameters(), restored.named_parameters()
    assert list(before) == list(after)
    for name in before:
        np.testing.assert_array_equal(before[name].data, after[name].data)
    assert restored.neighbor_table.tolist() == nrm_net.neighbor_table.tolist()
    assert restored.with_aux

    images = np.random.default_rng(0).uniform(size=(2, 1, 64, 64)).astype(np.float32)
    a, b = infer(nrm_net, images), infer(restored, images)
    for tap in a:
        np.testing.assert_array_equal(a[tap], b[tap])


def test_checkpoint_blob_layout(tmp_path, nrm_net):
    manifest = json.loads(save_checkpoint(nrm_net, tmp_path / "m").read_text())
    blob = (tmp_path / "m.bin").read_bytes()
    assert sum(t["nbytes"] for t in manifest["tensors"]) == len(blob)
    assert all(t["dtype"] == "<f4" for t in manifest["tensors"])


def test_missing_or_truncated_checkpoint_raises(tmp_path, nrm_net):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent")
    save_checkpoint(nrm_net, tmp_path / "m")
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:100])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m")
    (tmp_path / "m.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "m")


def test_train_csv_has_one_row_per_epoch(tmp_path):
    report = TrainReport(head_kind=HeadKind.PIP, records=[
        EpochRecord(epoch=e, loss=1.0 / (e + 1), loss_score=0.5, loss_offset=0.2, loss_neighbor=0.0)
        for e in range(3)
    ])
    stc = TrainReport(head_kind=HeadKind.PIP, records=[
        EpochRecord(epoch=0, loss=0.1, loss_score=0.1, loss_offset=0.0, loss_neighbor=0.0, round=1, task=TaskId.T1,
                    val_nme=4.5)
    ])
    path = write_train_csv([report, stc], tmp_path / "train.csv")
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 4
    assert rows[1]["L"] == repr(0.5)
    assert rows[0]["val_nme"] == ""
    assert (rows[3]["round"], rows[3]["task"], float(rows[3]["val_nme"])) == ("1", "T1", 4.5)


def test_per_landmark_csv(tmp_path):
    path = write_per_landmark_csv([1.5, 2.5], tmp_path / "lm.csv", names=["jaw_l", "jaw_r"])
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows == [["landmark", "name", "nme"], ["0", "jaw_l", "1.5"], ["1", "jaw_r", "2.5"]]


def test_overlay_marks_landmarks(tmp_path):
    image = np.zeros((1, 64, 64), dtype=np.float32)
    gt = codec.LandmarkSet(np.array([[10.0, 10.0], [40.0, 30.0]]))
    pred = codec.LandmarkSet(np.array([[20.0, 50.0], [50.0, 50.0]]))
    path = save_overlay(image, tmp_path / "overlay.png", gt=gt, pred=pred)
    with Image.open(path) as img:
        assert img.size == (256, 256)
        rgb = np.asarray(img.convert("RGB"))
    assert tuple(rgb[40, 40]) == (0, 255, 0)
    assert tuple(rgb[200, 80]) == (255, 0, 0)


def test_config_hash_is_stable_and_sensitive():
    a = RunConfig(seed=1)
    assert config_hash(a) == config_hash(RunConfig.model_validate_json(a.model_dump_json()))
    assert config_hash(a) != config_hash(RunConfig(seed=2))


def test_run_manifest(tmp_path):
    cfg = RunConfig(seed=4)
    doc = json.loads(write_run_manifest(tmp_path, "train", cfg).read_text())
    assert doc["command"] == "train"
    assert doc["seed"] == 4
    assert doc["config_hash"] == config_hash(cfg)


def test_pseudo_labels_dump_as_unlabeled_dataset(tmp_path, face_samples):
    manifest = write_pseudo_labels(face_samples[:4], tmp_path / "pseudo" / "round_1")
    assert len(list((tmp_path / "pseudo" / "round_1" / "points").glob("*.pts"))) == 4
    loaded = load_manifest(manifest)
    assert [s.is_labeled for s in loaded] == [False] * 4
    np.testing.assert_array_equal(loaded[2].landmarks.points, face_samples[2].landmarks.points)
