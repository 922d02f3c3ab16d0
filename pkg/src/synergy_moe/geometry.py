"""Per-pixel world coordinates, sinusoidal 3D encodings and frame sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, DimensionError, GeometryError, ParameterError
from .tensor import Tensor, add

__all__ = [
    "CameraFrame",
    "GeoEncodingConfig",
    "lift_to_world",
    "sinusoidal_encode",
    "inject_coords",
    "sample_frames",
    "load_frame",
    "frame_from_dict",
    "frame_to_dict",
    "random_frame",
    "MAX_FRAMES",
]

MAX_FRAMES = 32


@dataclass(frozen=True)
class CameraFrame:
    depth: np.ndarray  # H x W, meters
    intrinsics: np.ndarray  # K, 3 x 3
    extrinsics: np.ndarray  # B, 4 x 4, camera -> world

    def __post_init__(self):
        depth = np.asarray(self.depth, dtype=np.float64)
        K = np.asarray(self.intrinsics, dtype=np.float64)
        B = np.asarray(self.extrinsics, dtype=np.float64)
        if depth.ndim != 2:
            raise GeometryError(f"depth must be H x W, got shape {depth.shape}")
        if K.shape != (3, 3) or B.shape != (4, 4):
            raise GeometryError(f"intrinsics must be 3x3 and extrinsics 4x4, got {K.shape} and {B.shape}")
        for name, arr in (("depth", depth), ("intrinsics", K), ("extrinsics", B)):
            if not np.isfinite(arr).all():
                raise GeometryError(f"{name} contains non-finite values")
        if (depth < 0).any():
            raise GeometryError("depth entries must be nonnegative")
        if abs(np.linalg.det(K)) <= 1e-12:
            raise GeometryError("intrinsics matrix is singular")
        if np.abs(B[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-12:
            raise GeometryError(f"extrinsics bottom row must be [0 0 0 1], got {B[3].tolist()}")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "extrinsics", B)

    @property
    def height(self) -> int:
        return self.depth.shape[0]

    @property
    def width(self) -> int:
        return self.depth.shape[1]


def lift_to_world(frame: CameraFrame) -> np.ndarray:
    """World coordinates of every pixel, shape H x W x 3.

    Pixel (i, j) is row i, column j, with no half-pixel offset. The row
    vector ``[D_ij * [j, i, 1] @ inv(K).T, 1]`` is multiplied by ``B.T``.
    """
    h, w = frame.depth.shape
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    pix = np.stack([jj, ii, np.ones_like(ii)], axis=-1) * frame.depth[..., None]
    cam = pix @ np.linalg.inv(frame.intrinsics).T
    homo = np.concatenate([cam, np.ones((h, w, 1))], axis=-1)
    world = homo @ frame.extrinsics.T
    return world[..., :3]


@dataclass(frozen=True)
class GeoEncodingConfig:
    # wavelengths base * ratio**f for f in range(num_frequencies)
    num_frequencies: int = 8
    base_wavelength: float = 1.0
    ratio: float = 2.0
    output_dim: int = 48

    def __post_init__(self):
        if self.num_frequencies < 1:
            raise ParameterError("num_frequencies must be >= 1")
        if self.base_wavelength <= 0 or self.ratio <= 0:
            raise ParameterError("base_wavelength and ratio must be positive")
        if self.output_dim < self.raw_dim:
            raise ParameterError(
                f"output_dim {self.output_dim} smaller than the {self.raw_dim} encoded channels"
            )

    @property
    def raw_dim(self) -> int:
        return 6 * self.num_frequencies

    def frequencies(self) -> np.ndarray:
        f = np.arange(self.num_frequencies, dtype=np.float64)
        return 2.0 * math.pi / (self.base_wavelength * self.ratio**f)


def sinusoidal_encode(points: np.ndarray, cfg: GeoEncodingConfig = GeoEncodingConfig()) -> Tensor:
    """Encode ... x 3 points as rows ``[sin(w a), cos(w a)]`` per axis a and frequency w.

    Channel layout per point: axis-major (x, y, z), then frequency, then the
    (sin, cos) pair. Rows are zero-padded up to ``cfg.output_dim``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    phase = pts[:, :, None] * cfg.frequencies()[None, None, :]  # n x 3 x F
    pairs = np.stack([np.sin(phase), np.cos(phase)], axis=-1)  # n x 3 x F x 2
    out = np.zeros((n, cfg.output_dim))
    out[:, : cfg.raw_dim] = pairs.reshape(n, -1)
    return Tensor(out)


def inject_coords(visual_tokens: Tensor, encodings: Tensor) -> Tensor:
    if visual_tokens.shape != encodings.shape:
        raise DimensionError(
            f"inject_coords: token shape {visual_tokens.shape} != encoding shape {encodings.shape}"
        )
    return add(visual_tokens, encodings)


def sample_frames(total_frames: int, max_frames: int = MAX_FRAMES) -> list[int]:
    """Uniform-stride frame indices; keeps first and last once over the cap."""
    if total_frames < 1 or max_frames < 1:
        raise ParameterError(f"frame counts must be >= 1, got total={total_frames}, max={max_frames}")
    if total_frames <= max_frames:
        return list(range(total_frames))
    if max_frames == 1:
        return [0]
    return [(i * (total_frames - 1)) // (max_frames - 1) for i in range(max_frames)]


def frame_from_dict(doc: dict) -> CameraFrame:
    try:
        depth = doc["depth"]
        if isinstance(depth, dict):
            dims = depth["dims"]
            values = np.asarray(depth["data"], dtype=np.float64)
            if len(dims) != 2 or values.size != dims[0] * dims[1]:
                raise DataError(f"depth dims {dims} do not match {values.size} values")
            depth = values.reshape(dims)
        K = np.asarray(doc["K"], dtype=np.float64)
        B = np.asarray(doc["B"], dtype=np.float64)
    except KeyError as exc:
        raise DataError(f"camera frame document missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        raise DataError(f"camera frame document malformed: {exc}") from None
    if K.size != 9 or B.size != 16:
        raise DataError(f"K needs 9 values and B 16, got {K.size} and {B.size}")
    return CameraFrame(np.asarray(depth, dtype=np.float64), K.reshape(3, 3), B.reshape(4, 4))


def frame_to_dict(frame: CameraFrame) -> dict:
    return {
        "depth": {"dims": list(frame.depth.shape), "data": frame.depth.reshape(-1).tolist()},
        "K": frame.intrinsics.reshape(-1).tolist(),
        "B": frame.extrinsics.reshape(-1).tolist(),
    }


def load_frame(path: str | Path) -> CameraFrame:
    """Read a frame JSON document: ``{"depth": {"dims": [H, W], "data": [...]}, "K": [9], "B": [16]}``.

    ``json.JSONDecodeError`` propagates so callers can report the parse location.
    """
    with open(path, encoding="utf-8") as fh:
        return frame_from_dict(json.load(fh))


def random_frame(rng: np.random.Generator, height: int, width: int) -> CameraFrame:
    """A plausible pinhole rig with a random rigid pose and positive depth."""
    f = rng.uniform(0.5, 2.0, size=2)
    K = np.array([[f[0], rng.normal(0, 0.05), rng.uniform(0, width)],
                  [0.0, f[1], rng.uniform(0, height)],
                  [0.0, 0.0, 1.0]])
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    B = np.eye(4)
    B[:3, :3] = q
    B[:3, 3] = rng.normal(size=3)
    depth = rng.uniform(0.5, 5.0, size=(height, width))
    return CameraFrame(depth, K, B)
