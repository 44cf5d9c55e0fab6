import json

import numpy as np
import pytest

from shiftseg.dataset import (SYNTH_CLASSES, CloudFormatError, DatasetSplit, LabelMap,
                              SceneSpec, UnmappedLabelError, apply_label_map,
                              builtin_label_maps, generate_scene, load_cloud,
                              load_label_map, make_split, save_cloud, save_label_map)
from shiftseg.pointcloud import IGNORE_LABEL, PointCloud


def test_scene_determinism():
    spec = SceneSpec(seed=11)
    a = generate_scene(spec)
    b = generate_scene(spec)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.labels, b.labels)


def test_scene_ground_only():
    scene = generate_scene(SceneSpec(seed=2, enabled_classes=("road",)))
    assert set(np.unique(scene.labels)) == {SYNTH_CLASSES.index("road")}


def test_scene_minimum_class_presence():
    scene = generate_scene(SceneSpec(seed=3))
    counts = np.bincount(scene.labels, minlength=8)
    assert (counts >= 16).all()
    assert counts.sum() == 4096


def test_scene_rejects_tiny():
    with pytest.raises(ValueError):
        generate_scene(SceneSpec(seed=1, num_points=63))


def test_scene_class_balance_over_split():
    _, scenes = make_split(5, 32, 0.25)
    counts = np.zeros(8, dtype=np.int64)
    for scene in scenes:
        counts += np.bincount(scene.labels, minlength=8)
    frac = counts / counts.sum()
    assert (frac >= 0.01).all() and (frac <= 0.60).all()


# ---------------------------------------------------------------------------
# binary format


def test_cloud_round_trip(tmp_path):
    scene = generate_scene(SceneSpec(seed=7, num_points=256))
    path = tmp_path / "scene.a3pc"
    save_cloud(scene, path, 8)
    back, c = load_cloud(path)
    assert c == 8
    assert np.array_equal(back.positions, scene.positions)
    assert np.array_equal(back.labels, scene.labels)


def test_cloud_round_trip_is_byte_stable(tmp_path):
    scene = generate_scene(SceneSpec(seed=9, num_points=128))
    p1, p2 = tmp_path / "a.a3pc", tmp_path / "b.a3pc"
    save_cloud(scene, p1, 8)
    save_cloud(scene, p2, 8)
    assert p1.read_bytes() == p2.read_bytes()


def test_cloud_bad_magic(tmp_path):
    path = tmp_path / "bad.a3pc"
    path.write_bytes(b"XXXX" + b"\x00" * 20)
    with pytest.raises(CloudFormatError, match="offset 0"):
        load_cloud(path)


def test_cloud_truncated(tmp_path):
    scene = generate_scene(SceneSpec(seed=4, num_points=64))
    path = tmp_path / "t.a3pc"
    save_cloud(scene, path, 8)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(CloudFormatError, match="offset"):
        load_cloud(path)


def test_cloud_hand_built_fixture(tmp_path):
    import struct
    path = tmp_path / "hand.a3pc"
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQH", b"A3PC", 1, 2, 19))
        f.write(struct.pack("<dddH", 1.0, 2.0, 3.0, 0))
        f.write(struct.pack("<dddH", 4.0, 5.0, 6.0, 255))
    cloud, c = load_cloud(path)
    assert c == 19
    assert np.array_equal(cloud.positions, [[1, 2, 3], [4, 5, 6]])
    assert cloud.labels.tolist() == [0, 255]


def test_cloud_nonfinite_rejected(tmp_path):
    import struct
    path = tmp_path / "inf.a3pc"
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQH", b"A3PC", 1, 1, 8))
        f.write(struct.pack("<dddH", np.inf, 0.0, 0.0, 0))
    with pytest.raises(CloudFormatError, match="record 0"):
        load_cloud(path)


# ---------------------------------------------------------------------------
# label maps


def test_builtin_maps_exist_and_are_total():
    maps = builtin_label_maps()
    assert set(maps) == {"semantickitti", "synlidar", "semanticstf"}
    for m in maps.values():
        for target in m.entries.values():
            assert target == IGNORE_LABEL or 0 <= target <= 18


def test_synlidar_quoted_entries():
    m = builtin_label_maps()["synlidar"].entries
    assert m[2] == 3  # pick-up -> truck
    assert m[25] == 255  # traffic-cone -> ignore
    assert m[0] == 255


def test_semanticstf_quoted_entries():
    m = builtin_label_maps()["semanticstf"].entries
    assert m[20] == 255
    assert m[0] == 255
    assert m[1] == 0 and m[19] == 18


def test_semantickitti_derived_entries():
    m = builtin_label_maps()["semantickitti"].entries
    # static classes in unified order
    assert [m[i] for i in (10, 11, 15, 18, 20, 30, 31, 32)] == [0, 1, 2, 3, 4, 5, 6, 7]
    assert [m[i] for i in (40, 44, 48, 49, 50, 51, 70, 71, 72, 80, 81)] == \
        [8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18]
    # moving variants collapse onto their static counterparts
    assert m[252] == 0 and m[253] == 6 and m[254] == 5 and m[255] == 7
    assert m[258] == 3 and m[259] == 4
    # everything outside the kept set is ignored
    for raw in (0, 1, 13, 16, 52, 60, 99, 256, 257):
        assert m[raw] == 255


def test_apply_label_map():
    cloud = PointCloud(np.zeros((3, 3)), np.array([2, 25, 0], np.uint16), "syn")
    out = apply_label_map(cloud, builtin_label_maps()["synlidar"])
    assert out.labels.tolist() == [3, 255, 255]
    assert np.array_equal(out.positions, cloud.positions)


def test_apply_label_map_unmapped_id_named():
    cloud = PointCloud(np.zeros((2, 3)), np.array([2, 999], np.uint16), "syn")
    with pytest.raises(UnmappedLabelError, match="999"):
        apply_label_map(cloud, builtin_label_maps()["synlidar"])


def test_double_mapping_rejected():
    # unified data contains ids outside each raw domain, so a second
    # application fails instead of silently remapping
    maps = builtin_label_maps()
    cloud = PointCloud(np.zeros((21, 3)), np.arange(21).astype(np.uint16), "stf")
    unified = apply_label_map(cloud, maps["semanticstf"])
    with pytest.raises(UnmappedLabelError):
        apply_label_map(unified, maps["semanticstf"])
    cloud2 = PointCloud(np.zeros((2, 3)), np.array([10, 15], np.uint16), "sk")
    unified2 = apply_label_map(cloud2, maps["semantickitti"])  # -> {0, 2}
    with pytest.raises(UnmappedLabelError):
        apply_label_map(unified2, maps["semantickitti"])


def test_label_map_target_validation():
    with pytest.raises(ValueError):
        LabelMap("bad", {0: 19})


def test_label_map_json_round_trip(tmp_path):
    m = builtin_label_maps()["synlidar"]
    path = tmp_path / "map.json"
    save_label_map(m, path)
    back = load_label_map(path)
    assert back.name == m.name and back.entries == m.entries
    doc = json.loads(path.read_text())
    assert set(doc) == {"name", "entries"}


# ---------------------------------------------------------------------------
# splits


def test_split_sizes_and_disjoint():
    split, scenes = make_split(3, 10, 0.2)
    assert len(split.val) == 2 and len(split.train) == 8
    assert not set(split.train) & set(split.val)
    assert len(scenes) == 10


def test_split_deterministic():
    a, _ = make_split(9, 12, 0.25)
    b, _ = make_split(9, 12, 0.25)
    assert a.train == b.train and a.val == b.val


def test_split_seed_lineage():
    split, scenes = make_split(100, 10, 0.2)
    for i in range(10):
        cid = f"scene-{i:04d}"
        assert split.scene_seeds[cid] == 100 + i
    regen = generate_scene(SceneSpec(seed=103), cloud_id="scene-0003")
    match = [s for s in scenes if s.cloud_id == "scene-0003"][0]
    assert np.array_equal(regen.positions, match.positions)


def test_split_overlap_rejected():
    with pytest.raises(ValueError):
        DatasetSplit(train=["a", "b"], val=["b"])
