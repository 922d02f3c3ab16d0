"""Synergy tokens, alignment projectors and the coarse distillation objective."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, add, concat, index, load_tensor, matmul, mse, save_tensor, scale, silu

__all__ = [
    "SynergySlice",
    "MLP",
    "AlignmentProjector",
    "TeacherFeatures",
    "LossWeights",
    "insert_synergy_tokens",
    "extract_synergy",
    "init_projector",
    "project_synergy",
    "coarse_loss",
    "total_stage2_loss",
    "mock_teacher",
    "mock_teachers",
    "save_teachers",
    "load_teachers",
]

SYNERGY_TOKENS = 4
TEMPORAL_DIM = 12
SPATIAL_DIM = 10


@dataclass
class SynergySlice:
    hidden: Tensor  # S x d_model, last-layer states at the synergy positions

    def __post_init__(self):
        if self.hidden.data.ndim != 2 or self.hidden.shape[0] < 1:
            raise DimensionError(f"synergy slice must be S x d with S >= 1, got {self.hidden.shape}")


def insert_synergy_tokens(sequence: Tensor, count: int, embedding: Tensor) -> tuple[Tensor, list[int]]:
    """Append the first ``count`` rows of ``embedding`` after ``sequence``.

    Returns the extended sequence and the synergy positions.
    """
    if count < 1:
        raise ParameterError("synergy token count must be >= 1")
    if count > embedding.shape[0]:
        raise ParameterError(f"requested {count} synergy tokens but only {embedding.shape[0]} embeddings exist")
    if embedding.shape[1] != sequence.shape[1]:
        raise DimensionError(f"synergy width {embedding.shape[1]} != sequence width {sequence.shape[1]}")
    t = sequence.shape[0]
    rows = embedding if count == embedding.shape[0] else index(embedding, slice(0, count))
    return concat([sequence, rows], axis=0), list(range(t, t + count))


def extract_synergy(hidden: Tensor, mask: list[int]) -> SynergySlice:
    return SynergySlice(index(hidden, np.asarray(mask, dtype=np.int64)))


@dataclass
class MLP:
    """Two bias-free linear maps with SiLU between them (or identity when ``activation`` is off)."""

    w1: Tensor
    w2: Tensor
    activation: bool = True

    def __call__(self, x: Tensor) -> Tensor:
        h = matmul(x, self.w1)
        if self.activation:
            h = silu(h)
        return matmul(h, self.w2)

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


@dataclass
class AlignmentProjector:
    temporal: MLP
    spatial: MLP

    def parameters(self) -> list[Tensor]:
        return self.temporal.parameters() + self.spatial.parameters()


def init_projector(
    rng: np.random.Generator,
    d_model: int,
    temporal_dim: int = TEMPORAL_DIM,
    spatial_dim: int = SPATIAL_DIM,
    hidden: int | None = None,
) -> AlignmentProjector:
    hidden = hidden or d_model

    def mlp(out_dim):
        w1 = Tensor(rng.normal(0.0, d_model**-0.5, size=(d_model, hidden)), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, hidden**-0.5, size=(hidden, out_dim)), requires_grad=True)
        return MLP(w1, w2)

    return AlignmentProjector(mlp(temporal_dim), mlp(spatial_dim))


def project_synergy(sl: SynergySlice, proj: AlignmentProjector) -> tuple[Tensor, Tensor]:
    x = sl.hidden
    for name, mlp in (("temporal", proj.temporal), ("spatial", proj.spatial)):
        if mlp.w1.shape[0] != x.shape[1]:
            raise DimensionError(f"{name} projector expects width {mlp.w1.shape[0]}, synergy states have {x.shape[1]}")
    return proj.temporal(x), proj.spatial(x)


@dataclass
class TeacherFeatures:
    temporal: Tensor  # S x d_t
    spatial: Tensor  # S x d_g


def coarse_loss(f_v: Tensor, f_g: Tensor, teachers: TeacherFeatures) -> Tensor:
    """Temporal plus spatial squared error, summed over synergy tokens and channels."""
    if f_v.shape != teachers.temporal.shape:
        raise DimensionError(f"temporal projection {f_v.shape} vs teacher {teachers.temporal.shape}")
    if f_g.shape != teachers.spatial.shape:
        raise DimensionError(f"spatial projection {f_g.shape} vs teacher {teachers.spatial.shape}")
    return add(mse(teachers.temporal, f_v), mse(teachers.spatial, f_g))


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ParameterError(f"alpha must be finite and nonnegative, got {self.alpha}")


def total_stage2_loss(coarse: Tensor, aux: Tensor, w: LossWeights) -> Tensor:
    return add(coarse, scale(aux, w.alpha))


_KINDS = ("temporal", "spatial")


def mock_teacher(seed: int, kind: str, dims: tuple[int, int]) -> Tensor:
    """Seeded unit-norm feature rows standing in for a frozen foundation model."""
    if kind not in _KINDS:
        raise ParameterError(f"teacher kind must be one of {_KINDS}, got {kind!r}")
    rows, width = dims
    if rows < 1 or width < 1:
        raise ParameterError(f"teacher dims must be positive, got {dims}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(kind.encode()), rows, width])
    x = np.random.default_rng(ss).normal(size=(rows, width))
    return Tensor(x / np.linalg.norm(x, axis=1, keepdims=True))


def mock_teachers(
    seed: int, count: int = SYNERGY_TOKENS, temporal_dim: int = TEMPORAL_DIM, spatial_dim: int = SPATIAL_DIM
) -> TeacherFeatures:
    return TeacherFeatures(
        mock_teacher(seed, "temporal", (count, temporal_dim)),
        mock_teacher(seed, "spatial", (count, spatial_dim)),
    )


def save_teachers(t: TeacherFeatures, directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_tensor(t.temporal, d / "temporal.txt")
    save_tensor(t.spatial, d / "spatial.txt")


def load_teachers(directory: str | Path) -> TeacherFeatures:
    d = Path(directory)
    return TeacherFeatures(load_tensor(d / "temporal.txt"), load_tensor(d / "spatial.txt"))
