"""Landmark dataset ingestion, 70:30 splitting and a synthetic rigid-head generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

N_LANDMARKS = 68
IMAGE_SIZE = 64


class DatasetError(ValueError):
    """A dataset file could not be parsed."""


class ValidationError(ValueError):
    """A record parsed but violates the sample contract."""


@dataclass(frozen=True)
class PoseAngles:
    yaw: float
    pitch: float
    roll: float

    def as_array(self) -> np.ndarray:
        return np.array([self.yaw, self.pitch, self.roll], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "PoseAngles":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class RawLandmarkSet:
    sample_id: str
    points: np.ndarray  # (68, 3)
    pose: PoseAngles
    image_ref: str | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (N_LANDMARKS, 3):
            n = pts.shape[0] if pts.ndim >= 1 else 0
            raise ValidationError(f"sample {self.sample_id!r}: expected 68 landmarks of 3 coordinates, got {n} ({pts.shape})")
        if not np.all(np.isfinite(pts)):
            raise ValidationError(f"sample {self.sample_id!r}: non-finite landmark coordinate")
        for name in ("yaw", "pitch", "roll"):
            v = getattr(self.pose, name)
            if not math.isfinite(v) or not -180.0 <= v <= 180.0:
                raise ValidationError(f"sample {self.sample_id!r}: {name}={v} outside [-180, 180] degrees")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, RawLandmarkSet):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.pose == other.pose
            and self.image_ref == other.image_ref
            and np.array_equal(self.points, other.points)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


# ---------------------------------------------------------------------------
# JSONL ingestion


def _record_to_sample(rec: dict, base: Path | None) -> RawLandmarkSet:
    sid = str(rec["id"])
    pose = rec["pose"]
    image = rec.get("image")
    if image is not None and base is not None and not Path(image).is_absolute():
        image = str(base / image)
    return RawLandmarkSet(
        sample_id=sid,
        points=np.asarray(rec["landmarks"], dtype=np.float64),
        pose=PoseAngles(float(pose["yaw"]), float(pose["pitch"]), float(pose["roll"])),
        image_ref=image,
    )


def parse_record(line: str, base: Path | None = None, lineno: int | None = None) -> RawLandmarkSet:
    where = f"line {lineno}" if lineno is not None else "record"
    try:
        rec = json.loads(line)
        if not isinstance(rec, dict):
            raise TypeError("record is not a JSON object")
        return _record_to_sample(rec, base)
    except ValidationError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{where}: malformed record ({exc})") from exc


def _load_file(path: Path, with_images: bool) -> list[RawLandmarkSet]:
    samples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(parse_record(line, path.parent, lineno))
            except DatasetError as exc:
                raise DatasetError(f"{path}:{exc}") from exc.__cause__
    if with_images:
        missing = [s.sample_id for s in samples if s.image_ref is None]
        if missing:
            raise ValidationError(f"{path}: samples without images: {', '.join(missing[:10])}")
        for s in samples:
            load_face_image(s.image_ref)
    return samples


def load_dataset(path: str | Path, with_images: bool = False) -> list[RawLandmarkSet]:
    """Read samples from a JSONL file, or every ``*.jsonl`` in a directory (sorted by name).

    With ``with_images`` every sample must reference a readable 64x64 RGB image.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
    else:
        files = [path]
    out: list[RawLandmarkSet] = []
    for f in files:
        out.extend(_load_file(f, with_images))
    return out


def sample_to_record(sample: RawLandmarkSet, base: Path | None = None) -> dict:
    rec = {
        "id": sample.sample_id,
        "landmarks": sample.points.tolist(),
        "pose": {"yaw": sample.pose.yaw, "pitch": sample.pose.pitch, "roll": sample.pose.roll},
    }
    if sample.image_ref is not None:
        ref = Path(sample.image_ref)
        if base is not None:
            try:
                ref = ref.resolve().relative_to(base.resolve())
            except ValueError:
                pass
        rec["image"] = ref.as_posix()
    return rec


def save_dataset(samples: Iterable[RawLandmarkSet], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, path.parent)) + "\n")


# ---------------------------------------------------------------------------
# images


def load_face_image(path: str | Path) -> np.ndarray:
    """Load a 64x64 RGB PNG as a (3, 64, 64) float array scaled to [0, 1]."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read face image {path}: {exc}") from exc
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise ValidationError(f"face image {path} is {arr.shape[1]}x{arr.shape[0]}, expected 64x64")
    return arr.transpose(2, 0, 1) / 255.0


def render_face_image(points: np.ndarray) -> np.ndarray:
    """Rasterise landmarks into a (64, 64, 3) uint8 image.

    Orthographic projection onto the image plane; dot brightness encodes depth.
    Gives the image branch a pose-dependent input on synthetic data.
    """
    from PIL import Image, ImageDraw

    im = Image.new("RGB", (IMAGE_SIZE, IMAGE_SIZE), (40, 40, 40))
    draw = ImageDraw.Draw(im)
    c = IMAGE_SIZE / 2
    s = IMAGE_SIZE * 0.33
    draw.ellipse([c - 1.15 * s, c - 1.45 * s, c + 1.15 * s, c + 1.3 * s], fill=(150, 120, 100))
    z = points[:, 2]
    zmin, zmax = float(z.min()), float(z.max())
    span = zmax - zmin if zmax > zmin else 1.0
    for x, y, zz in points:
        u, v = c + s * x, c - s * y
        shade = int(80 + 175 * (zz - zmin) / span)
        draw.ellipse([u - 1, v - 1, u + 1, v + 1], fill=(shade, shade // 2, 255 - shade))
    return np.asarray(im)


def attach_rendered_images(samples: Sequence[RawLandmarkSet], directory: str | Path) -> list[RawLandmarkSet]:
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for s in samples:
        dest = directory / f"{s.sample_id}.png"
        Image.fromarray(render_face_image(s.points)).save(dest)
        out.append(replace(s, image_ref=str(dest)))
    return out


# ---------------------------------------------------------------------------
# splitting


def split_70_30(samples: Sequence[RawLandmarkSet], seed: int) -> DatasetSplit:
    n = len(samples)
    if n < 10:
        raise ValueError(f"split_70_30 needs at least 10 samples, got {n}")
    n_train = int(math.floor(0.7 * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    ids = [samples[i].sample_id for i in order]
    return DatasetSplit(train=tuple(ids[:n_train]), test=tuple(ids[n_train:]), seed=seed)


def select(samples: Sequence[RawLandmarkSet], ids: Iterable[str]) -> list[RawLandmarkSet]:
    by_id = {s.sample_id: s for s in samples}
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# rotations and the synthetic generator


@lru_cache(maxsize=1)
def face_template() -> np.ndarray:
    """The shipped 68-point frontal face template (x right, y up, z toward camera)."""
    text = resources.files("gads").joinpath("assets", "face_template_v1.json").read_text()
    pts = np.array(json.loads(text)["points"], dtype=np.float64)
    pts.setflags(write=False)
    return pts


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in degrees."""
    y, p, r = np.radians([yaw, pitch, roll])
    cx, sx = math.cos(p), math.sin(p)
    cy, sy = math.cos(y), math.sin(y)
    cz, sz = math.cos(r), math.sin(r)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def euler_from_matrix(R: np.ndarray) -> PoseAngles:
    """Inverse of :func:`rotation_matrix` for |yaw| < 90 degrees."""
    yaw = -math.asin(max(-1.0, min(1.0, R[2, 0])))
    pitch = math.atan2(R[2, 1], R[2, 2])
    roll = math.atan2(R[1, 0], R[0, 0])
    return PoseAngles(math.degrees(yaw), math.degrees(pitch), math.degrees(roll))


def generate_synthetic(n: int, max_angle: float, noise_std: float, seed: int) -> list[RawLandmarkSet]:
    """Rotate the face template by uniformly drawn Euler angles and add Gaussian noise.

    Noise standard deviation is ``noise_std`` times the template's largest
    axis extent.
    """
    if not 0.0 < max_angle <= 60.0:
        raise ValueError(f"max_angle must be in (0, 60], got {max_angle}")
    if noise_std < 0:
        raise ValueError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    template = face_template()
    extent = float(np.ptp(template, axis=0).max())
    angles = rng.uniform(-max_angle, max_angle, size=(n, 3))
    noise = rng.standard_normal(size=(n, N_LANDMARKS, 3)) * (noise_std * extent)
    out = []
    for i in range(n):
        yaw, pitch, roll = (float(a) for a in angles[i])
        pts = template @ rotation_matrix(yaw, pitch, roll).T
        if noise_std > 0:
            pts = pts + noise[i]
        out.append(RawLandmarkSet(f"syn{seed}-{i:06d}", pts, PoseAngles(yaw, pitch, roll)))
    return out
