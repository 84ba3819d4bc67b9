import json

import numpy as np
import pytest

from revit.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from revit.config import ReViTConfig, TokenSchedule
from revit.model import ParamStore


def small_store():
    cfg = ReViTConfig(image_size=16, embed_dim=8, depth=1, heads=2, num_classes=3,
                      schedule=TokenSchedule.for_image(16, [(4, 4), (2, 2)]))
    return ParamStore(cfg, seed=3)


def test_round_trip_is_bitwise(tmp_path):
    store = small_store()
    (tmp_path / "second").mkdir()
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "second" / "a.ckpt"
    save_checkpoint(store.params, p1)
    loaded = load_checkpoint(p1)
    save_checkpoint(loaded, p2)
    assert p1.with_name("a.ckpt.blob").read_bytes() == p2.with_name("a.ckpt.blob").read_bytes()
    assert p1.read_text() == p2.read_text()
    for name, p in store.items():
        np.testing.assert_array_equal(loaded[name], p.data)
        assert loaded[name].dtype == p.data.dtype


def test_manifest_lists_every_tensor(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    manifest = json.loads(path.read_text())
    assert len(manifest["tensors"]) == len(store.params)
    assert set(manifest) == {"version", "blob", "tensors"}


def test_tampered_offset_names_tensor(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    manifest = json.loads(path.read_text())
    manifest["tensors"][2]["offset"] += 4
    victim = manifest["tensors"][2]["name"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=victim):
        load_checkpoint(path)


def test_unknown_fields_rejected(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    manifest = json.loads(path.read_text())
    manifest["extra"] = 1
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="extra"):
        load_checkpoint(path)

    save_checkpoint(store.params, path)
    manifest = json.loads(path.read_text())
    manifest["tensors"][0]["note"] = "hi"
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="note"):
        load_checkpoint(path)


def test_shape_mismatch_detected_via_blob_size(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    manifest = json.loads(path.read_text())
    manifest["tensors"][-1]["shape"] = [10**6]
    name = manifest["tensors"][-1]["name"]
    path.write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match=name):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    blob = path.with_name("m.ckpt.blob")
    blob.write_bytes(blob.read_bytes() + b"\x00\x00\x00\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_float64_tensors_round_trip(tmp_path):
    params = {"x": np.linspace(0, 1, 7).astype(np.float64), "y": np.ones((2, 2), dtype=np.float32)}
    path = tmp_path / "m.ckpt"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path)
    np.testing.assert_array_equal(loaded["x"], params["x"])
    assert loaded["x"].dtype == np.float64
    assert loaded["y"].dtype == np.float32


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope.ckpt")
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    path.with_name("m.ckpt.blob").unlink()
    with pytest.raises(FileNotFoundError):
        load_checkpoint(path)


def test_store_load_round_trip(tmp_path):
    store = small_store()
    path = tmp_path / "m.ckpt"
    save_checkpoint(store.params, path)
    other = small_store()
    for p in other.params.values():
        p.data[...] = 0.0
    other.load(load_checkpoint(path))
    for name, p in store.items():
        np.testing.assert_array_equal(other[name].data, p.data)
