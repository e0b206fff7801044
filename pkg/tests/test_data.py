import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from poseanon.data import (Dataset, ProceduralConfig, dataset_summary, generate_procedural,
                           head_mask, load_archive, load_upna, pose_scale, pose_unscale,
                           render_face_proxy, save_archive, split_per_video)
from poseanon.errors import ConfigError, DataError


# -- pose normalization ------------------------------------------------------

def test_pose_scale_fixed_point():
    assert np.allclose(pose_scale((0.0, 0.0, 0.0)), (0.0, 0.0, 0.0))


def test_pose_scale_linear_map():
    assert np.allclose(pose_scale((90.0, -90.0, 45.0)), (1.0, -1.0, 0.5))


def test_pose_scale_round_trip():
    rng = np.random.default_rng(3)
    angles = rng.uniform(-90, 90, size=(1000, 3))
    back = pose_unscale(pose_scale(angles))
    assert np.abs(back - angles).max() < 1e-6


def test_pose_scale_range_error():
    with pytest.raises(ValueError):
        pose_scale((91.0, 0.0, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-90, 90), min_size=3, max_size=3))
def test_pose_scale_bounds(angles):
    out = pose_scale(angles)
    assert np.all(np.abs(out) <= 1.0 + 1e-12)


# -- procedural dataset ------------------------------------------------------

def test_procedural_counts_and_determinism():
    cfg = ProceduralConfig(n_subjects=5, frames_per_subject=40, image_size=(32, 32, 3), seed=7)
    ds1 = generate_procedural(cfg)
    ds2 = generate_procedural(cfg)
    assert len(ds1) == 200 and ds1.n_subjects == 5
    assert np.array_equal(ds1.images, ds2.images)
    assert np.array_equal(ds1.poses, ds2.poses)
    assert ds1.images.min() >= -1.0 and ds1.images.max() <= 1.0
    assert np.abs(ds1.poses).max() <= 60.0


def test_procedural_config_errors():
    with pytest.raises(ConfigError):
        ProceduralConfig(n_subjects=1, frames_per_subject=10)
    with pytest.raises(ConfigError):
        ProceduralConfig(n_subjects=2, frames_per_subject=10, image_size=(8, 8, 3))


def test_render_zero_pose_symmetric_under_horizontal_flip():
    img = render_face_proxy(1, (0.0, 0.0, 0.0), (32, 32, 3))
    assert np.allclose(img, img[:, ::-1, :], atol=1e-6)


def test_render_same_pose_different_identities_differ():
    pose = (10.0, -20.0, 15.0)
    a = render_face_proxy(1, pose, (32, 32, 3))
    b = render_face_proxy(2, pose, (32, 32, 3))
    assert np.abs(a - b).max() > 0.05


def test_render_roll_rotates_mask():
    # Oracle: evaluate the roll-0 implicit ellipse at coordinates rotated by
    # the roll angle, pixel by pixel, and compare with the rendered mask.
    size = (48, 48, 3)
    roll = 33.0
    rendered = head_mask((0.0, 0.0, roll), size) > 0.5

    r = np.deg2rad(roll)
    sx, sy = 0.54, 0.40
    h, w = size[0], size[1]
    oracle = np.zeros((h, w), dtype=bool)
    for iy in range(h):
        v = (iy + 0.5) / h * 2 - 1
        for ix in range(w):
            u = (ix + 0.5) / w * 2 - 1
            qx = np.cos(r) * u + np.sin(r) * v
            qy = -np.sin(r) * u + np.cos(r) * v
            oracle[iy, ix] = (qx / sx) ** 2 + (qy / sy) ** 2 <= 1.0
    agree = (rendered == oracle).mean()
    assert agree > 0.99


def test_procedural_pose_labels_are_generation_parameters():
    cfg = ProceduralConfig(n_subjects=2, frames_per_subject=6, seed=3)
    ds = generate_procedural(cfg)
    for i in range(len(ds)):
        sample = ds[i]
        again = render_face_proxy(sample.identity, sample.pose, cfg.image_size)
        assert np.array_equal(sample.image, again)


# -- splitting ----------------------------------------------------------------

def _synthetic_dataset(n_videos=10, frames_per_video=100, n_subjects=5):
    n = n_videos * frames_per_video
    images = np.zeros((n, 16, 16, 3), dtype=np.float32)
    video_ids = np.repeat(np.arange(1, n_videos + 1), frames_per_video)
    identities = (video_ids - 1) % n_subjects + 1
    poses = np.zeros((n, 3), dtype=np.float32)
    return Dataset(images, identities, poses, video_ids, n_subjects)


def test_split_exact_per_video_counts():
    ds = _synthetic_dataset()
    pair = split_per_video(ds, 0.8, seed=3)
    assert len(pair.train) == 800 and len(pair.test) == 200
    for video in range(1, 11):
        assert (pair.train.video_ids == video).sum() == 80
        assert (pair.test.video_ids == video).sum() == 20


def test_split_two_frame_video():
    ds = _synthetic_dataset(n_videos=2, frames_per_video=2, n_subjects=2)
    pair = split_per_video(ds, 0.5, seed=1)
    for video in (1, 2):
        assert (pair.train.video_ids == video).sum() == 1
        assert (pair.test.video_ids == video).sum() == 1


def test_split_determinism():
    ds = _synthetic_dataset()
    a = split_per_video(ds, 0.8, seed=9)
    b = split_per_video(ds, 0.8, seed=9)
    assert np.array_equal(a.train.video_ids, b.train.video_ids)
    assert np.array_equal(a.train.images, b.train.images)
    assert np.array_equal(a.train.poses, b.train.poses)


def test_split_union_is_whole_video():
    ds = _synthetic_dataset(n_videos=3, frames_per_video=7, n_subjects=3)
    ds.poses[:] = np.arange(len(ds) * 3, dtype=np.float32).reshape(-1, 3) % 90
    ds = Dataset(ds.images, ds.identities, ds.poses, ds.video_ids, ds.n_subjects)
    pair = split_per_video(ds, 0.8, seed=2)
    merged = np.sort(np.concatenate([pair.train.poses[:, 0], pair.test.poses[:, 0]]))
    assert np.array_equal(merged, np.sort(ds.poses[:, 0]))


def test_split_rejects_single_frame_video():
    images = np.zeros((3, 16, 16, 3), dtype=np.float32)
    ds = Dataset(images, np.array([1, 2, 2]), np.zeros((3, 3), dtype=np.float32),
                 np.array([1, 2, 2]), 2)
    with pytest.raises(DataError):
        split_per_video(ds, 0.5, seed=0)


def test_split_fraction_bounds():
    ds = _synthetic_dataset()
    for bad in (0.0, 1.0, -0.2, 1.5):
        with pytest.raises(ConfigError):
            split_per_video(ds, bad, seed=0)


# -- archive -------------------------------------------------------------------

def test_archive_round_trip(tmp_path, tiny_dataset):
    path = tmp_path / "data.zip"
    save_archive(tiny_dataset, path)
    loaded = load_archive(path)
    assert np.array_equal(loaded.images, tiny_dataset.images)
    assert np.array_equal(loaded.poses, tiny_dataset.poses)
    assert np.array_equal(loaded.identities, tiny_dataset.identities)
    assert np.array_equal(loaded.video_ids, tiny_dataset.video_ids)
    assert loaded.n_subjects == tiny_dataset.n_subjects


def test_archive_refuses_overwrite(tmp_path, tiny_dataset):
    path = tmp_path / "data.zip"
    save_archive(tiny_dataset, path)
    with pytest.raises(ConfigError):
        save_archive(tiny_dataset, path)
    save_archive(tiny_dataset, path, force=True)


def test_archive_deterministic_bytes(tmp_path, tiny_dataset):
    a, b = tmp_path / "a.zip", tmp_path / "b.zip"
    save_archive(tiny_dataset, a)
    save_archive(tiny_dataset, b)
    assert a.read_bytes() == b.read_bytes()


def test_archive_corrupt_file(tmp_path):
    path = tmp_path / "bad.zip"
    path.write_bytes(b"this is not a zip archive")
    with pytest.raises(DataError):
        load_archive(path)


def test_dataset_rejects_out_of_range_pixels():
    images = np.full((2, 16, 16, 3), 1.5, dtype=np.float32)
    with pytest.raises(DataError):
        Dataset(images, np.array([1, 2]), np.zeros((2, 3)), np.array([1, 2]), 2)


# -- UPNA loader ---------------------------------------------------------------

def _write_upna_tree(root, n_subjects=2, n_videos=2, n_frames=3, size=(60, 80)):
    rng = np.random.default_rng(0)
    manifest = {"subjects": []}
    for sid in range(1, n_subjects + 1):
        videos = []
        for v in range(1, n_videos + 1):
            vid = (sid - 1) * n_videos + v
            rel = f"s{sid}/v{v}"
            frames_dir = root / rel
            frames_dir.mkdir(parents=True)
            pose_rows, bbox_rows = [], []
            for f in range(n_frames):
                name = f"frame{f:03d}.png"
                arr = rng.integers(0, 256, size=(size[0], size[1], 3), dtype=np.uint8)
                Image.fromarray(arr).save(frames_dir / name)
                pose_rows.append(f"{name},{10 * f},{-5 * f},{2 * f}")
                bbox_rows.append(f"{name},4,2,48,40")
            (root / f"{rel}_pose.csv").write_text("\n".join(pose_rows) + "\n")
            (root / f"{rel}_bbox.csv").write_text("\n".join(bbox_rows) + "\n")
            videos.append({"video_id": vid, "frames_dir": rel,
                           "pose_file": f"{rel}_pose.csv", "bbox_file": f"{rel}_bbox.csv"})
        manifest["subjects"].append({"id": sid, "videos": videos})
    (root / "manifest.yaml").write_text(yaml.safe_dump(manifest))
    return manifest


def test_load_upna_small_tree(tmp_path):
    _write_upna_tree(tmp_path)
    ds = load_upna(tmp_path, image_size=(24, 24))
    assert len(ds) == 12 and ds.n_subjects == 2
    assert ds.image_size == (24, 24, 3)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0
    assert ds.poses[1].tolist() == [10.0, -5.0, 2.0]


def test_load_upna_identity_crop(tmp_path):
    # Full-frame box on an already-target-size frame: loading reduces to the
    # [0,255] -> [-1,1] rescale, checked pixelwise.
    frames = tmp_path / "s1/v1"
    frames.mkdir(parents=True)
    rng = np.random.default_rng(1)
    arr = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    Image.fromarray(arr).save(frames / "only.png")
    (tmp_path / "pose.csv").write_text("only.png,1,2,3\n")
    (tmp_path / "bbox.csv").write_text("only.png,0,0,64,64\n")
    manifest = {"subjects": [{"id": 1, "videos": [{
        "video_id": 1, "frames_dir": "s1/v1", "pose_file": "pose.csv", "bbox_file": "bbox.csv"}]}]}
    (tmp_path / "manifest.yaml").write_text(yaml.safe_dump(manifest))
    ds = load_upna(tmp_path, image_size=(64, 64))
    expected = arr.astype(np.float32) / 127.5 - 1.0
    assert np.allclose(ds.images[0], expected, atol=1e-6)


def test_load_upna_missing_ground_truth(tmp_path):
    _write_upna_tree(tmp_path)
    (tmp_path / "s1/v1_pose.csv").unlink()
    with pytest.raises(DataError, match="v1_pose.csv"):
        load_upna(tmp_path, image_size=(24, 24))


def test_load_upna_skips_bad_boxes(tmp_path):
    _write_upna_tree(tmp_path)
    bbox = tmp_path / "s1/v1_bbox.csv"
    rows = bbox.read_text().splitlines()
    rows[0] = rows[0].rsplit(",", 4)[0] + ",70,2,48,40"  # box beyond frame width
    bbox.write_text("\n".join(rows) + "\n")
    ds = load_upna(tmp_path, image_size=(24, 24))
    assert len(ds) == 11
    assert ds.meta["skipped_frames"] == 1


def test_load_upna_empty(tmp_path):
    (tmp_path / "manifest.yaml").write_text(yaml.safe_dump({"subjects": []}))
    with pytest.raises(DataError):
        load_upna(tmp_path)
    with pytest.raises(DataError):
        load_upna(tmp_path / "does-not-exist")


def test_dataset_summary_mentions_counts(tiny_dataset):
    text = dataset_summary(tiny_dataset)
    assert "samples: 72" in text
    assert "yaw" in text and "roll" in text
