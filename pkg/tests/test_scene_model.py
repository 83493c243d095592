import itertools
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from scene_model import (
    CameraIntrinsics,
    DegenerateMeshError,
    DepthMap,
    EmptyMaskError,
    InvalidDepthError,
    ObjectMask,
    ObjectSpec,
    PixelBoundsError,
    PoseSample,
    PoseTrack,
    SceneParseError,
    SceneSpec,
    SceneValidationError,
    center_crop_region,
    d1_metric,
    emit_urdf,
    ingest_object,
    load_scene,
    masked_diameter,
    mesh_diameter,
    pose_delta,
    read_depth_bin,
    read_mask_rle,
    read_pose_track,
    read_vertices,
    save_scene,
    scale_ratio,
    unproject_pixel,
    write_depth_bin,
)


def _obj(name="block", rho=1.0, size=(0.05, 0.05, 0.05), samples=None):
    samples = samples or [PoseSample(0, (0.4, 0.0, 0.025), (1.0, 0.0, 0.0, 0.0))]
    return ObjectSpec(
        name=name,
        mesh_diameter=0.0866,
        size=size,
        scale_ratio=rho,
        urdf_path=f"urdf/{name}.urdf",
        pose_track=PoseTrack(samples),
    )


def _oracle(mask, depth, K):
    pts = [unproject_pixel(K, (int(i), int(j)), depth.values[i, j]) for i, j in mask.pixels if depth.values[i, j] > 0]
    best = 0.0
    for a, b in itertools.combinations(pts, 2):
        best = max(best, float(np.sqrt(np.sum((a - b) ** 2))))
    return best


# ---------------------------
# unproject_pixel
# ---------------------------
def test_unproject_principal_point_at_unit_depth():
    K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    assert unproject_pixel(K, (0, 0), 1.0).tolist() == [0.0, 0.0, 1.0]


def test_unproject_uses_column_as_x_and_row_as_y():
    K = CameraIntrinsics(2.0, 2.0, 1.0, 1.0)
    assert unproject_pixel(K, (1, 3), 2.0).tolist() == [2.0, 0.0, 2.0]


def test_unproject_rejects_zero_depth_and_out_of_bounds():
    K = CameraIntrinsics(1.0, 1.0, 0.0, 0.0, width=4, height=4)
    with pytest.raises(InvalidDepthError):
        unproject_pixel(K, (0, 0), 0.0)
    with pytest.raises(PixelBoundsError):
        unproject_pixel(K, (4, 0), 1.0)


def test_unproject_is_linear_in_depth():
    K = CameraIntrinsics(500.0, 480.0, 320.0, 240.0)
    a = unproject_pixel(K, (17, 401), 0.7)
    b = unproject_pixel(K, (17, 401), 1.4)
    assert np.allclose(b, 2 * a, rtol=0, atol=1e-15)


# ---------------------------
# masked_diameter
# ---------------------------
def test_masked_diameter_single_pixel_is_zero():
    depth = DepthMap(3, 3, np.ones(9))
    mask = ObjectMask.from_pixels(3, 3, [(1, 1)])
    assert masked_diameter(mask, depth, CameraIntrinsics(1, 1, 0, 0)) == 0.0


def test_masked_diameter_two_pixel_direct_distance():
    K = CameraIntrinsics(10.0, 10.0, 0.0, 0.0)
    depth = DepthMap(4, 1, np.ones(4))
    mask = ObjectMask.from_pixels(4, 1, [(0, 0), (0, 3)])
    assert masked_diameter(mask, depth, K) == pytest.approx(0.3, abs=1e-15)


def test_masked_diameter_3x3_matches_pair_oracle():
    K = CameraIntrinsics(1.0, 1.0, 1.0, 1.0)
    depth = DepthMap(3, 3, np.ones(9))
    mask = ObjectMask.from_pixels(3, 3, [(i, j) for i in range(3) for j in range(3)])
    assert masked_diameter(mask, depth, K) == _oracle(mask, depth, K)


def test_masked_diameter_equals_oracle_on_random_fixtures():
    rng = np.random.default_rng(7)
    for _ in range(50):
        w, h = int(rng.integers(4, 24)), int(rng.integers(4, 24))
        vals = rng.uniform(0.3, 2.0, h * w)
        vals[rng.random(h * w) < 0.1] = 0.0
        depth = DepthMap(w, h, vals)
        n = int(rng.integers(1, min(200, w * h) + 1))
        flat = rng.choice(w * h, size=n, replace=False)
        mask = ObjectMask.from_pixels(w, h, [(int(f // w), int(f % w)) for f in flat])
        K = CameraIntrinsics(float(rng.uniform(50, 600)), float(rng.uniform(50, 600)), w / 2, h / 2)
        if not np.any(depth.values[mask.pixels[:, 0], mask.pixels[:, 1]] > 0):
            continue
        assert masked_diameter(mask, depth, K) == pytest.approx(_oracle(mask, depth, K), abs=1e-12)


def test_masked_diameter_skips_zero_depth_and_errors_when_none_valid():
    depth = DepthMap(2, 1, np.array([0.0, 0.0]))
    mask = ObjectMask.from_pixels(2, 1, [(0, 0), (0, 1)])
    with pytest.raises(EmptyMaskError):
        masked_diameter(mask, depth, CameraIntrinsics(1, 1, 0, 0))


def test_masked_diameter_rejects_size_mismatch():
    with pytest.raises(ValueError):
        masked_diameter(ObjectMask.from_pixels(2, 2, [(0, 0)]), DepthMap(3, 3, np.ones(9)), CameraIntrinsics(1, 1, 0, 0))


def test_mask_pixel_outside_image_raises():
    with pytest.raises(PixelBoundsError):
        ObjectMask.from_pixels(2, 2, [(2, 0)])


# ---------------------------
# mesh_diameter / scale_ratio
# ---------------------------
def test_mesh_diameter_unit_cube_is_sqrt3():
    cube = list(itertools.product([0.0, 1.0], repeat=3))
    assert mesh_diameter(cube) == pytest.approx(math.sqrt(3), abs=1e-15)


def test_mesh_diameter_single_vertex_and_empty():
    assert mesh_diameter([(1.0, 2.0, 3.0)]) == 0.0
    with pytest.raises(DegenerateMeshError):
        mesh_diameter([])


def test_mesh_diameter_hull_path_matches_brute_force():
    rng = np.random.default_rng(3)
    V = rng.normal(size=(2500, 3))
    brute = max(float(np.max(np.linalg.norm(V[i] - V, axis=1))) for i in range(len(V)))
    assert mesh_diameter(V) == pytest.approx(brute, rel=0, abs=1e-12)


def test_mesh_diameter_500_random_vertices_matches_oracle():
    V = np.random.default_rng(11).uniform(-1, 1, size=(500, 3))
    d = np.sqrt(((V[:, None, :] - V[None, :, :]) ** 2).sum(-1)).max()
    assert mesh_diameter(V) == pytest.approx(float(d), abs=1e-12)


def test_scale_ratio_examples_and_errors():
    assert scale_ratio(0.5, 0.5) == 1.0
    assert scale_ratio(0.21, 0.07) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(DegenerateMeshError):
        scale_ratio(0.1, 0.0)


def test_scale_ratio_recovers_uniform_scale():
    V = np.random.default_rng(5).normal(size=(300, 3))
    for s in (0.01, 0.37, 4.2):
        assert scale_ratio(mesh_diameter(s * V), mesh_diameter(V)) == pytest.approx(s, abs=1e-9)


# ---------------------------
# pose_delta
# ---------------------------
def test_pose_delta_single_sample_is_zero():
    track = PoseTrack([PoseSample(0, (0.1, 0.2, 0.3), (1, 0, 0, 0))])
    d = pose_delta(track)
    assert d.delta_position.tolist() == [0.0, 0.0, 0.0]
    assert d.delta_yaw == 0.0


def test_pose_delta_leftward_push_and_quarter_turn():
    s = math.sqrt(0.5)
    track = PoseTrack(
        [
            PoseSample(0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0)),
            PoseSample(30, (-0.2, 0.0, 0.0), (s, 0.0, 0.0, s)),
        ]
    )
    d = pose_delta(track)
    assert np.allclose(d.delta_position, [-0.2, 0.0, 0.0])
    assert d.delta_yaw == pytest.approx(math.pi / 2, abs=1e-12)
    assert d.first.frame_index == 0 and d.last.frame_index == 30


def test_pose_delta_empty_track_raises():
    with pytest.raises(ValueError):
        pose_delta(PoseTrack([]))


# ---------------------------
# d1
# ---------------------------
def test_d1_exact_agreement_and_all_off():
    gt = DepthMap(4, 4, np.full(16, 2.0))
    assert d1_metric(gt, gt) == 1.0
    assert d1_metric(DepthMap(4, 4, np.full(16, 3.0)), gt) == 0.0


def test_d1_ignores_invalid_ground_truth_and_respects_region():
    gt_vals = np.full(100, 1.0)
    gt_vals[0] = 0.0
    pred_vals = np.full(100, 1.05)
    pred_vals[55] = 2.0  # inside the center crop
    gt, pred = DepthMap(10, 10, gt_vals), DepthMap(10, 10, pred_vals)
    region = center_crop_region(10, 10, 0.8)
    assert len(region) == 64
    assert d1_metric(pred, gt, region) == pytest.approx(63 / 64)
    assert d1_metric(pred, gt) == pytest.approx(98 / 99)


def test_d1_monotone_in_uniform_error():
    gt = DepthMap(8, 8, np.random.default_rng(1).uniform(0.5, 2.0, 64))
    noise = np.random.default_rng(2).uniform(-1, 1, 64)
    scores = [d1_metric(DepthMap(8, 8, gt.values.ravel() * (1 + e * noise)), gt) for e in (0.0, 0.05, 0.1, 0.2, 0.4)]
    assert all(a >= b for a, b in zip(scores, scores[1:]))


# ---------------------------
# URDF
# ---------------------------
def test_urdf_scale_attribute_and_bounding_size():
    one = emit_urdf(_obj(rho=1.0))
    assert 'scale="1 1 1"' in one
    three = emit_urdf(_obj(rho=3.0, size=(0.18, 0.04, 0.02)))
    root = ET.fromstring(three.split("\n", 1)[1])
    scales = {m.get("scale") for m in root.iter("mesh")}
    assert scales == {"3 3 3"}
    box = next(root.iter("box"))
    assert [float(v) for v in box.get("size").split()] == [0.18, 0.04, 0.02]


def test_urdf_is_byte_stable_and_sanitizes_names():
    obj = _obj(name="remote")
    assert emit_urdf(obj) == emit_urdf(obj)
    odd = emit_urdf(_obj(name="9 lives/cat"))
    root = ET.fromstring(odd.split("\n", 1)[1])
    assert root.get("name") == "_9_lives_cat"


def test_urdf_scale_roundtrips_rho():
    rho = 0.123456789012
    root = ET.fromstring(emit_urdf(_obj(rho=rho)).split("\n", 1)[1])
    got = float(next(root.iter("mesh")).get("scale").split()[0])
    assert got == pytest.approx(rho, abs=1e-9)


# ---------------------------
# Scene files
# ---------------------------
def _scene(objs=None):
    return SceneSpec(task_title="push block", caption="pushing a block to the left", objects=objs or [_obj()])


def test_scene_roundtrip_preserves_unknown_fields(tmp_path):
    p = tmp_path / "scene.json"
    raw = {
        "task_title": "t",
        "caption": "c",
        "table_height": 0.0,
        "video": "clip_001.mp4",
        "objects": [
            {
                "name": "a",
                "size": [0.1, 0.1, 0.1],
                "mesh_diameter": 0.17,
                "scale_ratio": 1.0,
                "urdf_path": "urdf/a.urdf",
                "pose_track": [{"frame": 0, "pos": [0.4, 0, 0.05], "quat": [1, 0, 0, 0]}],
                "color": "red",
            }
        ],
    }
    p.write_text(json.dumps(raw), encoding="utf-8")
    scene = load_scene(p)
    assert scene.extra == {"video": "clip_001.mp4"}
    assert scene.objects[0].extra == {"color": "red"}
    out = tmp_path / "again.json"
    save_scene(scene, out)
    again = json.loads(out.read_text(encoding="utf-8"))
    assert again["video"] == "clip_001.mp4"
    assert again["objects"][0]["color"] == "red"
    assert load_scene(out) == scene


def test_scene_duplicate_names_fail_validation(tmp_path):
    with pytest.raises(SceneValidationError) as e:
        save_scene(_scene([_obj("a"), _obj("a")]), tmp_path / "s.json")
    assert any("duplicated" in f for f in e.value.failures)


def test_scene_two_objects_with_pose_deltas(tmp_path):
    samples = [PoseSample(0, (0.4, 0.0, 0.02), (1, 0, 0, 0)), PoseSample(10, (0.3, 0.0, 0.02), (1, 0, 0, 0))]
    p = save_scene(_scene([_obj("a", samples=samples), _obj("b", samples=samples)]), tmp_path / "s.json")
    scene = load_scene(p)
    for o in scene.objects:
        assert np.allclose(pose_delta(o.pose_track).delta_position, [-0.1, 0.0, 0.0])


def test_scene_parse_error_has_location(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"task_title": "t",\n "caption": }', encoding="utf-8")
    with pytest.raises(SceneParseError) as e:
        load_scene(p)
    assert str(p) in str(e.value)


# ---------------------------
# Readers / ingest
# ---------------------------
def test_readers_and_ingest_object(tmp_path):
    w, h = 8, 6
    write_depth_bin(DepthMap(w, h, np.full(w * h, 1.0)), tmp_path / "depth.bin")
    (tmp_path / "mask.rle").write_text("# one row\n2 1 5\n", encoding="utf-8")
    (tmp_path / "mesh.obj").write_text("v 0 0 0\nv 1 0 0\nv 0 0.5 0\nv 0 0 0.25\nf 1 2 3\n", encoding="utf-8")
    (tmp_path / "track.json").write_text(
        json.dumps([{"frame": 0, "pos": [0, 0, 0], "quat": [1, 0, 0, 0]}, {"frame": 5, "pos": [0.1, 0, 0], "quat": [1, 0, 0, 0]}]),
        encoding="utf-8",
    )
    depth = read_depth_bin(tmp_path / "depth.bin")
    mask = read_mask_rle(tmp_path / "mask.rle", w, h)
    verts = read_vertices(tmp_path / "mesh.obj")
    track = read_pose_track(tmp_path / "track.json")
    assert len(mask) == 5 and verts.shape == (4, 3) and len(track.samples) == 2

    K = CameraIntrinsics(10.0, 10.0, 4.0, 3.0)
    obj = ingest_object("box", mask, depth, K, verts, track, urdf_path="urdf/box.urdf")
    d_image = 0.4  # columns 1..5 at depth 1, fx = 10
    d_mesh = math.sqrt(1.0 + 0.25)
    assert obj.scale_ratio == pytest.approx(d_image / d_mesh, rel=1e-12)
    assert obj.size[0] == pytest.approx(1.0 * obj.scale_ratio)
    assert obj.size[1] == pytest.approx(0.5 * obj.scale_ratio)


def test_read_depth_bin_rejects_truncated_file(tmp_path):
    p = tmp_path / "d.bin"
    p.write_bytes(b"\x02\x00\x00\x00\x02\x00\x00\x00\x00\x00")
    with pytest.raises(SceneParseError):
        read_depth_bin(p)
