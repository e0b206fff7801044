"""Datasets: UPNA-layout loading, a procedural desk-scale stand-in,
per-video splitting, pose normalization, and a binary archive format.

Images are float32 H x W x C arrays in [-1, 1]. Identities are 1-based.
Poses are (yaw, pitch, roll) in degrees, each within [-90, 90].
"""

from __future__ import annotations

import colorsys
import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from .errors import ConfigError, DataError
from .rng import make_numpy_rng

log = logging.getLogger(__name__)

POSE_LIMIT_DEG = 90.0
ARCHIVE_FORMAT = "poseanon-dataset"
ARCHIVE_VERSION = 1
# Fixed zip timestamp so archives are byte-reproducible.
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


@dataclass
class FaceSample:
    """One labeled frame: image + identity + continuous pose + source video."""

    image: np.ndarray
    identity: int
    pose: tuple[float, float, float]
    video_id: int


class Dataset:
    """Ordered collection of face samples backed by contiguous arrays."""

    def __init__(self, images: np.ndarray, identities: np.ndarray, poses: np.ndarray,
                 video_ids: np.ndarray, n_subjects: int, meta: dict | None = None):
        self.images = np.asarray(images, dtype=np.float32)
        self.identities = np.asarray(identities, dtype=np.int64)
        self.poses = np.asarray(poses, dtype=np.float32)
        self.video_ids = np.asarray(video_ids, dtype=np.int64)
        self.n_subjects = int(n_subjects)
        self.meta = dict(meta or {})
        self.validate()

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, index: int) -> FaceSample:
        return FaceSample(self.images[index], int(self.identities[index]),
                          tuple(float(a) for a in self.poses[index]), int(self.video_ids[index]))

    @property
    def image_size(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.identities[idx], self.poses[idx],
                       self.video_ids[idx], self.n_subjects, meta=self.meta)

    def validate(self) -> None:
        n = self.images.shape[0]
        if self.images.ndim != 4:
            raise DataError(f"images must be (N, H, W, C), got shape {self.images.shape}")
        if not (self.identities.shape == (n,) and self.poses.shape == (n, 3)
                and self.video_ids.shape == (n,)):
            raise DataError("label arrays do not match the number of images")
        if n == 0:
            return
        lo, hi = float(self.images.min()), float(self.images.max())
        if lo < -1.0 or hi > 1.0:
            raise DataError(f"pixel values outside [-1, 1]: min {lo}, max {hi}")
        if np.abs(self.poses).max() > POSE_LIMIT_DEG:
            raise DataError(f"pose angles outside [-{POSE_LIMIT_DEG}, {POSE_LIMIT_DEG}] degrees")
        ids = set(np.unique(self.identities).tolist())
        if ids != set(range(1, self.n_subjects + 1)):
            raise DataError(f"identities present {sorted(ids)} != 1..{self.n_subjects}")


@dataclass
class SplitPair:
    train: Dataset
    test: Dataset


def pose_scale(angles_deg) -> np.ndarray:
    """Degrees -> normalized units in [-1, 1] (divide by 90)."""
    angles = np.asarray(angles_deg, dtype=np.float64)
    if angles.size and np.abs(angles).max() > POSE_LIMIT_DEG:
        raise ValueError(f"pose angle outside [-{POSE_LIMIT_DEG}, {POSE_LIMIT_DEG}] degrees")
    return angles / POSE_LIMIT_DEG


def pose_unscale(angles_norm) -> np.ndarray:
    """Normalized units -> degrees (multiply by 90)."""
    return np.asarray(angles_norm, dtype=np.float64) * POSE_LIMIT_DEG


# ---------------------------------------------------------------------------
# Procedural desk-scale dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProceduralConfig:
    n_subjects: int
    frames_per_subject: int
    image_size: tuple[int, int, int] = (32, 32, 3)
    seed: int = 0
    videos_per_subject: int = 4
    pose_range_deg: float = 60.0  # moderate poses; avoids degenerate renders

    def __post_init__(self):
        if self.n_subjects < 2:
            raise ConfigError("procedural data needs n_subjects >= 2 (identity replacement "
                              "is meaningless with a single subject)")
        h, w, c = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size must be at least 16x16, got {h}x{w}")
        if c != 3:
            raise ConfigError("procedural renderer emits 3-channel images")
        if self.frames_per_subject < 1:
            raise ConfigError("frames_per_subject must be >= 1")
        if not 1 <= self.videos_per_subject <= self.frames_per_subject:
            raise ConfigError("videos_per_subject must be in 1..frames_per_subject")
        if not 0 < self.pose_range_deg <= POSE_LIMIT_DEG:
            raise ConfigError("pose_range_deg must be in (0, 90]")


def _isoluminant(theta: float) -> np.ndarray:
    """A vivid color with fixed channel sum (1.5) parameterized by hue angle."""
    phases = theta + np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
    return 0.5 + 0.42 * np.cos(phases)


def _identity_palette(identity: int) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Per-identity stripe color pair plus stripe frequency and phase.

    All identity colors are isoluminant (equal channel sums) and the stripes
    interpolate between two such colors, so image luminance carries pure
    geometry while the chroma carries identity. Identity must be removable
    from the latent space while pose stays; an identity signal that is
    orthogonal to brightness keeps those goals compatible at desk scale.
    """
    k = identity - 1
    theta = 2.0 * np.pi * ((k * 0.618034) % 1.0)
    c1 = _isoluminant(theta)
    c2 = _isoluminant(theta + 1.9)
    freq = 1.5 + 0.8 * (k % 5)  # low frequencies stay legible at 32x32
    phase = 2.0 * np.pi * ((k * 0.381966) % 1.0)
    return c1 * 2.0 - 1.0, c2 * 2.0 - 1.0, freq, phase


_NOSE_COLOR = np.array([0.56, 0.56, 0.56])  # identity-neutral marker


def _pixel_grid(image_size) -> tuple[np.ndarray, np.ndarray]:
    h, w = image_size[0], image_size[1]
    u = (np.arange(w, dtype=np.float64) + 0.5) / w * 2.0 - 1.0
    v = (np.arange(h, dtype=np.float64) + 0.5) / h * 2.0 - 1.0
    return np.meshgrid(u, v)  # each (H, W); u varies along columns


def _face_frame(pose_deg, image_size) -> tuple[np.ndarray, np.ndarray]:
    """Face-frame coordinates (qx/sx, qy/sy) for every pixel.

    Yaw shifts and widens horizontally, pitch shifts and stretches
    vertically, roll rotates the frame in-plane, so all three angles are
    recoverable from the rendered geometry.
    """
    yaw, pitch, roll = (float(a) for a in pose_deg)
    yaw_n, pitch_n = yaw / POSE_LIMIT_DEG, pitch / POSE_LIMIT_DEG
    cx, cy = 0.42 * yaw_n, 0.42 * pitch_n
    sx = 0.54 * (1.0 + 0.35 * yaw_n)
    sy = 0.40 * (1.0 + 0.35 * pitch_n)
    r = np.deg2rad(roll)
    uu, vv = _pixel_grid(image_size)
    dx, dy = uu - cx, vv - cy
    qx = np.cos(r) * dx + np.sin(r) * dy
    qy = -np.sin(r) * dx + np.cos(r) * dy
    return qx / sx, qy / sy


def head_mask(pose_deg, image_size) -> np.ndarray:
    """Smooth [0, 1] mask of the head ellipse for a given pose."""
    nx, ny = _face_frame(pose_deg, image_size)
    return _smooth_inside(nx ** 2 + ny ** 2)


def _smooth_inside(field: np.ndarray, softness: float = 0.06) -> np.ndarray:
    t = np.clip((1.0 - field) / softness, -60.0, 60.0)  # avoid exp overflow far outside
    return 1.0 / (1.0 + np.exp(-t))


def render_face_proxy(identity: int, pose_deg, image_size=(32, 32, 3)) -> np.ndarray:
    """Deterministic face proxy: an identity-colored striped ellipse whose
    geometry encodes the pose, with an off-center nose disc disambiguating
    roll. Output is float32 H x W x 3 in [-1, 1]."""
    if identity < 1:
        raise ConfigError(f"identity must be >= 1, got {identity}")
    nx, ny = _face_frame(pose_deg, image_size)
    m_head = _smooth_inside(nx ** 2 + ny ** 2)
    # Off-axis nose disc: the unambiguous roll cue when yaw/pitch scaling
    # makes the ellipse nearly circular.
    m_nose = _smooth_inside((nx ** 2 + (ny - 0.45) ** 2) / 0.26 ** 2)

    c1, c2, freq, phase = _identity_palette(identity)
    stripes = 0.5 + 0.5 * np.sin(freq * np.pi * ny + phase)
    head = c1[None, None, :] + stripes[..., None] * (c2 - c1)[None, None, :]

    img = np.full(image_size, -0.85, dtype=np.float64)
    img = img + m_head[..., None] * (head - img)
    img = img + m_nose[..., None] * (_NOSE_COLOR[None, None, :] - img)
    return img.astype(np.float32)


def generate_procedural(config: ProceduralConfig) -> Dataset:
    """Seeded procedural dataset; pose labels are the exact generation
    parameters, uniform in [-pose_range, pose_range] per angle."""
    rng = make_numpy_rng(config.seed, "procedural")
    n_total = config.n_subjects * config.frames_per_subject
    h, w, c = config.image_size

    images = np.empty((n_total, h, w, c), dtype=np.float32)
    identities = np.empty(n_total, dtype=np.int64)
    poses = np.empty((n_total, 3), dtype=np.float32)
    video_ids = np.empty(n_total, dtype=np.int64)

    i = 0
    for subject in range(1, config.n_subjects + 1):
        # float32 up front so stored labels are bit-exactly the render inputs
        subject_poses = rng.uniform(-config.pose_range_deg, config.pose_range_deg,
                                    size=(config.frames_per_subject, 3)).astype(np.float32)
        for j in range(config.frames_per_subject):
            pose = subject_poses[j]
            images[i] = render_face_proxy(subject, pose, config.image_size)
            identities[i] = subject
            poses[i] = pose
            video_ids[i] = (subject - 1) * config.videos_per_subject + \
                (j * config.videos_per_subject) // config.frames_per_subject + 1
            i += 1

    return Dataset(images, identities, poses, video_ids, config.n_subjects,
                   meta={"source": "procedural", "seed": config.seed})


# ---------------------------------------------------------------------------
# Per-video split
# ---------------------------------------------------------------------------

def split_per_video(dataset: Dataset, train_fraction: float, seed: int) -> SplitPair:
    """Within each video, a seeded random floor(train_fraction * n) frames go
    to train, the rest to test."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = make_numpy_rng(seed, "split")
    train_idx, test_idx = [], []
    for video in np.unique(dataset.video_ids):
        members = np.flatnonzero(dataset.video_ids == video)
        if members.size < 2:
            raise DataError(f"video {int(video)} has {members.size} frame(s); need at least 2 to split")
        perm = rng.permutation(members.size)
        k = int(np.floor(train_fraction * members.size))
        train_idx.append(members[perm[:k]])
        test_idx.append(members[perm[k:]])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    pair = SplitPair(dataset.subset(train_idx), dataset.subset(test_idx))
    for name, part in (("train", pair.train), ("test", pair.test)):
        present = set(np.unique(part.identities).tolist())
        if present != set(range(1, dataset.n_subjects + 1)):
            raise DataError(f"{name} split lost identities: has {sorted(present)}")
    return pair


# ---------------------------------------------------------------------------
# Binary archive (images as little-endian float32 + JSON header)
# ---------------------------------------------------------------------------

def save_archive(dataset: Dataset, path, force: bool = False) -> None:
    path = Path(path)
    if path.exists() and not force:
        raise ConfigError(f"{path} exists; pass force=True to overwrite")
    arrays = {
        "images": dataset.images.astype("<f4"),
        "poses": dataset.poses.astype("<f4"),
        "identities": dataset.identities.astype("<i4"),
        "video_ids": dataset.video_ids.astype("<i4"),
    }
    header = {
        "format": ARCHIVE_FORMAT,
        "version": ARCHIVE_VERSION,
        "n_samples": len(dataset),
        "n_subjects": dataset.n_subjects,
        "image_size": list(dataset.image_size),
        "meta": dataset.meta,
        "arrays": {name: {"dtype": arr.dtype.str, "shape": list(arr.shape)}
                   for name, arr in arrays.items()},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", date_time=_ZIP_DATE),
                    json.dumps(header, sort_keys=True, indent=1))
        for name, arr in arrays.items():
            zf.writestr(zipfile.ZipInfo(f"{name}.bin", date_time=_ZIP_DATE), arr.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buf.getvalue())


def load_archive(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset archive not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format") != ARCHIVE_FORMAT:
                raise DataError(f"{path} is not a {ARCHIVE_FORMAT} archive")
            arrays = {}
            for name, spec in header["arrays"].items():
                raw = zf.read(f"{name}.bin")
                arr = np.frombuffer(raw, dtype=np.dtype(spec["dtype"]))
                arrays[name] = arr.reshape(spec["shape"]).copy()
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"corrupt dataset archive {path}: {exc}") from exc
    return Dataset(arrays["images"], arrays["identities"], arrays["poses"],
                   arrays["video_ids"], header["n_subjects"], meta=header.get("meta"))


# ---------------------------------------------------------------------------
# UPNA-layout loader
# ---------------------------------------------------------------------------

def _read_csv_map(path: Path, n_values: int) -> dict[str, tuple[float, ...]]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 1 + n_values:
                raise DataError(f"{path}: expected {1 + n_values} columns, got {len(row)}: {row}")
            out[row[0].strip()] = tuple(float(v) for v in row[1:])
    return out


def load_upna(root_path, image_size=(64, 64), manifest_name: str = "manifest.yaml") -> Dataset:
    """Load a UPNA-layout directory via its manifest.

    The manifest maps subject/video to a frames directory, a pose CSV
    (frame, yaw, pitch, roll in degrees) and a bounding-box CSV
    (frame, x, y, w, h in pixels). Each frame is cropped to its box,
    resized, and rescaled to [-1, 1]. Frames with bad boxes or missing
    ground-truth rows are skipped and counted, not fatal.
    """
    root = Path(root_path)
    manifest_path = root / manifest_name
    if not manifest_path.exists():
        raise DataError(f"missing manifest file: {manifest_path}")
    manifest = yaml.safe_load(manifest_path.read_text())
    subjects = (manifest or {}).get("subjects") or []
    if not subjects:
        raise DataError(f"{manifest_path} lists no subjects; nothing to load")

    h, w = image_size
    images, identities, poses, video_ids = [], [], [], []
    skipped = 0

    for subject in subjects:
        sid = int(subject["id"])
        for video in subject.get("videos", []):
            vid = int(video["video_id"])
            frames_dir = root / video["frames_dir"]
            pose_file = root / video["pose_file"]
            bbox_file = root / video["bbox_file"]
            for p in (pose_file, bbox_file):
                if not p.exists():
                    raise DataError(f"missing ground-truth file: {p}")
            pose_map = _read_csv_map(pose_file, 3)
            bbox_map = _read_csv_map(bbox_file, 4)

            for frame_name in sorted(pose_map):
                frame_path = frames_dir / frame_name
                box = bbox_map.get(frame_name)
                if box is None or not frame_path.exists():
                    skipped += 1
                    continue
                with Image.open(frame_path) as img:
                    img = img.convert("RGB")
                    x0, y0, bw, bh = box
                    if bw <= 0 or bh <= 0 or x0 < 0 or y0 < 0 or \
                            x0 + bw > img.width or y0 + bh > img.height:
                        skipped += 1
                        continue
                    crop = img.crop((round(x0), round(y0), round(x0 + bw), round(y0 + bh)))
                    crop = crop.resize((w, h), Image.BILINEAR)
                arr = np.asarray(crop, dtype=np.float32) / 127.5 - 1.0
                yaw, pitch, roll = pose_map[frame_name]
                images.append(arr)
                identities.append(sid)
                poses.append((yaw, pitch, roll))
                video_ids.append(vid)

    if skipped:
        log.warning("load_upna: skipped %d frame(s) with bad boxes or missing ground truth", skipped)
    if not images:
        raise DataError(f"no loadable frames under {root}")
    n_subjects = len({int(s["id"]) for s in subjects})
    return Dataset(np.stack(images), np.array(identities), np.array(poses, dtype=np.float32),
                   np.array(video_ids), n_subjects,
                   meta={"source": "upna", "skipped_frames": skipped})


def dataset_summary(dataset: Dataset, bins: int = 9) -> str:
    """Human-readable counts and per-angle pose histograms."""
    lines = [f"samples: {len(dataset)}", f"subjects: {dataset.n_subjects}",
             f"image size: {'x'.join(str(d) for d in dataset.image_size)}",
             f"videos: {len(np.unique(dataset.video_ids))}"]
    counts = np.bincount(dataset.identities, minlength=dataset.n_subjects + 1)[1:]
    lines.append("frames per subject: " + ", ".join(str(int(c)) for c in counts))
    for name, column in zip(("yaw", "pitch", "roll"), dataset.poses.T):
        hist, edges = np.histogram(column, bins=bins, range=(-POSE_LIMIT_DEG, POSE_LIMIT_DEG))
        row = " ".join(f"{int(c):4d}" for c in hist)
        lines.append(f"{name:>5} histogram [{edges[0]:.0f}..{edges[-1]:.0f} deg]: {row}")
    return "\n".join(lines)
