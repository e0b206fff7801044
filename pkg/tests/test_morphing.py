import numpy as np
import pytest
import torch
from PIL import Image

from poseanon.data import ProceduralConfig, generate_procedural
from poseanon.errors import ConfigError
from poseanon.model import ModelBundle, default_model_config, one_hot, images_to_tensor, tensor_to_images
from poseanon.morphing import (MorphMode, MorphRequest, frame_step_distances, identity_replace,
                               interpolate_identity, interpolate_latent, morph_sequence,
                               morph_smoothness, pose_track, to_uint8, write_image_strip,
                               write_pose_annotations)


@pytest.fixture(scope="module")
def bundle():
    return ModelBundle.build(default_model_config((16, 16, 3), 3, d_z=6, width=0.4), seed=2)


@pytest.fixture(scope="module")
def frames_data():
    return generate_procedural(ProceduralConfig(
        n_subjects=3, frames_per_subject=8, image_size=(16, 16, 3), seed=12,
        videos_per_subject=2))


# -- interpolation algebra ------------------------------------------------------

def test_interpolate_latent_endpoints_exact():
    z_i = torch.randn(1, 6)
    z_f = torch.randn(1, 6)
    assert torch.equal(interpolate_latent(z_i, z_f, 1.0), z_i)  # k=1 -> initial
    assert torch.equal(interpolate_latent(z_i, z_f, 0.0), z_f)


def test_interpolate_latent_midpoint():
    z_i = torch.tensor([[1.0, 0.0]])
    z_f = torch.tensor([[0.0, 1.0]])
    assert torch.allclose(interpolate_latent(z_i, z_f, 0.5), torch.tensor([[0.5, 0.5]]))


def test_interpolate_latent_range_error():
    z = torch.zeros(1, 4)
    for k in (-0.1, 1.1):
        with pytest.raises(ValueError):
            interpolate_latent(z, z, k)


def test_interpolate_latent_linearity_identity():
    rng = torch.Generator()
    rng.manual_seed(0)
    for _ in range(20):
        a = torch.randn(5, generator=rng)
        b = torch.randn(5, generator=rng)
        k = float(torch.rand(1, generator=rng))
        combined = interpolate_latent(a, b, k) + interpolate_latent(b, a, k)
        assert torch.allclose(combined, a + b, atol=1e-7)


def test_interpolate_identity_convex():
    c = interpolate_identity(one_hot(1, 3), one_hot(2, 3), 0.5)
    assert torch.allclose(c, torch.tensor([0.5, 0.5, 0.0]))


def test_interpolate_identity_sums_to_one():
    rng = np.random.default_rng(1)
    for _ in range(100):
        i, j = rng.integers(1, 6, size=2)
        k = float(rng.uniform(0, 1))
        c = interpolate_identity(one_hot(int(i), 5), one_hot(int(j), 5), k)
        assert abs(float(c.sum()) - 1.0) < 1e-6


# -- identity replacement --------------------------------------------------------

def test_identity_replace_deterministic(bundle, frames_data):
    img = frames_data[0].image
    a = identity_replace(bundle, img, 2)
    b = identity_replace(bundle, img, 2)
    assert np.array_equal(a, b)
    assert a.shape == img.shape
    assert a.min() >= -1.0 and a.max() <= 1.0


def test_identity_replace_self_is_reconstruction(bundle, frames_data):
    sample = frames_data[0]
    replaced = identity_replace(bundle, sample.image, sample.identity)
    x = images_to_tensor(sample.image[None])
    with torch.no_grad():
        recon = bundle.decode(bundle.encode_mean(x),
                              one_hot(sample.identity, 3).unsqueeze(0))
    assert np.array_equal(replaced, tensor_to_images(recon)[0])


# -- sequences ---------------------------------------------------------------------

def test_morph_sequence_two_steps_are_endpoints(bundle, frames_data):
    a, b = frames_data[0], frames_data[1]
    request = MorphRequest(mode=MorphMode.POSE_MORPH, steps=2, image_a=a.image,
                          image_b=b.image, identity_a=a.identity, identity_b=a.identity)
    frames = morph_sequence(bundle, request)
    assert len(frames) == 2
    x_a = images_to_tensor(a.image[None])
    x_b = images_to_tensor(b.image[None])
    code = one_hot(a.identity, 3).unsqueeze(0)
    with torch.no_grad():
        direct_a = tensor_to_images(bundle.decode(bundle.encode_mean(x_a), code))[0]
        direct_b = tensor_to_images(bundle.decode(bundle.encode_mean(x_b), code))[0]
    assert np.array_equal(frames[0], direct_a)
    assert np.array_equal(frames[-1], direct_b)


@pytest.mark.parametrize("steps", [2, 5, 9])
def test_pose_morph_endpoint_exactness(bundle, frames_data, steps):
    a, b = frames_data[2], frames_data[3]
    request = MorphRequest(mode=MorphMode.POSE_MORPH, steps=steps, image_a=a.image,
                          image_b=b.image, identity_a=a.identity)
    frames = morph_sequence(bundle, request)
    two = morph_sequence(bundle, MorphRequest(mode=MorphMode.POSE_MORPH, steps=2,
                                              image_a=a.image, image_b=b.image,
                                              identity_a=a.identity))
    assert len(frames) == steps
    assert np.array_equal(frames[0], two[0])
    assert np.array_equal(frames[-1], two[-1])


def test_identity_morph_sequence(bundle, frames_data):
    src = frames_data[0]
    request = MorphRequest(mode=MorphMode.IDENTITY_MORPH, steps=5, image_a=src.image,
                          identity_a=1, identity_b=3)
    frames = morph_sequence(bundle, request)
    assert len(frames) == 5
    assert np.array_equal(frames[0], identity_replace(bundle, src.image, 1))
    assert np.array_equal(frames[-1], identity_replace(bundle, src.image, 3))


def test_pose_morph_identity_mismatch_rejected(bundle, frames_data):
    a, b = frames_data[0], frames_data[1]
    request = MorphRequest(mode=MorphMode.POSE_MORPH, steps=3, image_a=a.image,
                          image_b=b.image, identity_a=1, identity_b=2)
    with pytest.raises(ConfigError):
        morph_sequence(bundle, request)


def test_replace_mode_sequence(bundle, frames_data):
    request = MorphRequest(mode=MorphMode.IDENTITY_REPLACE, image_a=frames_data[0].image,
                          target_identity=2)
    frames = morph_sequence(bundle, request)
    assert len(frames) == 1
    assert np.array_equal(frames[0], identity_replace(bundle, frames_data[0].image, 2))


def test_morph_request_validation():
    with pytest.raises(ConfigError):
        MorphRequest(mode=MorphMode.POSE_MORPH, steps=1)
    with pytest.raises(ValueError):
        MorphRequest(mode="nonsense", steps=3)


# -- diagnostics and output --------------------------------------------------------

def test_morph_smoothness_monotone():
    assert morph_smoothness(np.array([0.0, 1.0, 2.0, 3.0]))["band_violation"] == 0.0
    wiggly = morph_smoothness(np.array([0.0, 2.0, 1.0, 3.0]))
    assert abs(wiggly["band_violation"] - 1.0 / 3.0) < 1e-12
    flat = morph_smoothness(np.array([1.0, 1.0, 1.0]))
    assert flat["band_violation"] == 0.0


def test_frame_step_distances():
    frames = [np.zeros((4, 4, 3)), np.ones((4, 4, 3)), np.ones((4, 4, 3))]
    d = frame_step_distances(frames)
    assert d.shape == (2,)
    assert abs(d[0] - np.sqrt(48.0)) < 1e-9 and d[1] == 0.0


def test_pose_track_shape(bundle, frames_data):
    frames = [frames_data[i].image for i in range(3)]
    track = pose_track(bundle, frames)
    assert track.shape == (3, 3)


def test_to_uint8_range():
    img = np.array([[[-1.0, 0.0, 1.0]]])
    assert to_uint8(img).tolist() == [[[0, 127, 255]]]


def test_write_image_strip(tmp_path, frames_data):
    frames = [frames_data[i].image for i in range(4)]
    path = tmp_path / "strip.png"
    write_image_strip(frames, path)
    with Image.open(path) as img:
        assert img.size == (4 * 16, 16)
    grid_path = tmp_path / "grid.png"
    write_image_strip(frames, grid_path, rows=2)
    with Image.open(grid_path) as img:
        assert img.size == (2 * 16, 2 * 16)


def test_write_pose_annotations(tmp_path):
    poses = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    path = tmp_path / "pose.jsonl"
    write_pose_annotations(poses, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"yaw": 1.0' in lines[0]
