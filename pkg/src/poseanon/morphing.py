"""Identity replacement and latent/identity-code morphing.

Interpolation follows the convention z_interp = k * z_initial +
(1 - k) * z_final, so k = 1 recovers the initial endpoint and k = 0 the
final one (reversed from the more common convention; the CLI documents
this). Latent endpoints are encoder means, so sequences are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import ConfigError, ShapeError
from .model import ModelBundle, images_to_tensor, one_hot, tensor_to_images


class MorphMode(Enum):
    POSE_MORPH = "pose"
    IDENTITY_MORPH = "identity"
    IDENTITY_REPLACE = "replace"


@dataclass
class MorphRequest:
    mode: MorphMode
    steps: int = 2
    image_a: np.ndarray | None = None      # initial endpoint / source image
    image_b: np.ndarray | None = None      # final endpoint (pose morph)
    identity_a: int | None = None          # identity of image_a
    identity_b: int | None = None          # identity of image_b / final code
    target_identity: int | None = None     # replacement target

    def __post_init__(self):
        self.mode = MorphMode(self.mode)
        if self.steps < 2:
            raise ConfigError(f"steps must be >= 2, got {self.steps}")


def interpolate_latent(z_initial: torch.Tensor, z_final: torch.Tensor, k: float) -> torch.Tensor:
    """k * z_initial + (1 - k) * z_final; endpoints are returned exactly."""
    if z_initial.shape != z_final.shape:
        raise ShapeError(f"latent shape mismatch: {tuple(z_initial.shape)} vs {tuple(z_final.shape)}")
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"interpolation coefficient k={k} outside [0, 1]")
    if k == 1.0:
        return z_initial.clone()
    if k == 0.0:
        return z_final.clone()
    return k * z_initial + (1.0 - k) * z_final


def interpolate_identity(c_initial: torch.Tensor, c_final: torch.Tensor, k: float) -> torch.Tensor:
    """Convex combination of identity codes with the same k convention."""
    return interpolate_latent(c_initial, c_final, k)


def _encode_single(bundle: ModelBundle, image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3:
        raise ShapeError(f"expected one H x W x C image, got shape {image.shape}")
    x = images_to_tensor(image[None])
    with torch.no_grad():
        return bundle.encode_mean(x)


def _decode_single(bundle: ModelBundle, z: torch.Tensor, code: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return tensor_to_images(bundle.decode(z, code.unsqueeze(0)))[0]


def identity_replace(bundle: ModelBundle, image: np.ndarray, target_identity: int) -> np.ndarray:
    """Re-render one image with a new identity, preserving its pose."""
    z = _encode_single(bundle, image)
    return _decode_single(bundle, z, one_hot(target_identity, bundle.n_subjects))


def morph_sequence(bundle: ModelBundle, request: MorphRequest) -> list[np.ndarray]:
    """Frames from the initial endpoint (k = 1) to the final one (k = 0)."""
    if request.mode is MorphMode.IDENTITY_REPLACE:
        if request.image_a is None or request.target_identity is None:
            raise ConfigError("identity replacement needs image_a and target_identity")
        return [identity_replace(bundle, request.image_a, request.target_identity)]

    ks = [1.0 - i / (request.steps - 1) for i in range(request.steps)]

    if request.mode is MorphMode.POSE_MORPH:
        if request.image_a is None or request.image_b is None or request.identity_a is None:
            raise ConfigError("pose morphing needs image_a, image_b, and their shared identity")
        if request.identity_b is not None and request.identity_b != request.identity_a:
            raise ConfigError(f"pose morphing requires the same identity at both endpoints, "
                              f"got {request.identity_a} and {request.identity_b}")
        z_initial = _encode_single(bundle, request.image_a)
        z_final = _encode_single(bundle, request.image_b)
        code = one_hot(request.identity_a, bundle.n_subjects)
        return [_decode_single(bundle, interpolate_latent(z_initial, z_final, k), code)
                for k in ks]

    if request.image_a is None or request.identity_a is None or request.identity_b is None:
        raise ConfigError("identity morphing needs a source image and two identities")
    z = _encode_single(bundle, request.image_a)
    c_initial = one_hot(request.identity_a, bundle.n_subjects)
    c_final = one_hot(request.identity_b, bundle.n_subjects)
    return [_decode_single(bundle, z, interpolate_identity(c_initial, c_final, k))
            for k in ks]


def pose_track(bundle: ModelBundle, frames: list[np.ndarray]) -> np.ndarray:
    """Pose predictions (degrees) for each frame from the bundle's regressor."""
    x = images_to_tensor(np.stack(frames))
    with torch.no_grad():
        return bundle.pose_estimate(x).numpy() * 90.0


def morph_smoothness(values: np.ndarray) -> dict:
    """Monotonicity diagnostics for one scalar track along a sweep.

    `band_violation` is the worst backslide against the endpoint-to-endpoint
    direction, as a fraction of the endpoint gap; a sweep is monotone within
    a tolerance band of fraction t when band_violation <= t.
    """
    values = np.asarray(values, dtype=np.float64)
    gap = values[-1] - values[0]
    if gap == 0.0:
        return {"gap": 0.0, "band_violation": 0.0 if np.allclose(values, values[0]) else float("inf")}
    direction = np.sign(gap)
    oriented = direction * values
    backslide = float(np.max(np.maximum.accumulate(oriented) - oriented))
    return {"gap": float(gap), "band_violation": backslide / abs(gap)}


def frame_step_distances(frames: list[np.ndarray]) -> np.ndarray:
    """L2 distance between consecutive frames (spike diagnostics)."""
    arr = np.stack(frames).astype(np.float64)
    diffs = arr[1:] - arr[:-1]
    return np.sqrt((diffs ** 2).reshape(diffs.shape[0], -1).sum(axis=1))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """[-1, 1] float image -> uint8 for raster output."""
    return np.clip((np.asarray(image, dtype=np.float64) + 1.0) * 127.5, 0, 255).astype(np.uint8)


def write_image_strip(frames: list[np.ndarray], path, rows: int = 1) -> None:
    """Write frames as a lossless PNG strip (or grid with `rows` rows)."""
    if not frames:
        raise ConfigError("no frames to write")
    per_row = -(-len(frames) // rows)
    h, w = frames[0].shape[:2]
    grid = np.zeros((rows * h, per_row * w, 3), dtype=np.uint8)
    for i, frame in enumerate(frames):
        r, c = divmod(i, per_row)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = to_uint8(frame)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(grid).save(path, format="PNG")


def write_pose_annotations(poses_deg: np.ndarray, path) -> None:
    """Per-frame pose predictions alongside a strip, as JSON lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i, row in enumerate(np.asarray(poses_deg)):
            fh.write(json.dumps({"frame": i, "yaw": float(row[0]), "pitch": float(row[1]),
                                 "roll": float(row[2])}) + "\n")
