"""Seeded synthetic corpora standing in for captioning, instruction and CSQA data."""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError
from .geometry import GeoEncodingConfig, lift_to_world, random_frame, sinusoidal_encode
from .synergy import TeacherFeatures, mock_teachers

__all__ = ["Sample", "SyntheticWorld", "tokenize", "batches", "BOS", "SEP", "derive_seed"]

BOS = 0
SEP = 1
_WORD = re.compile(r"[a-z0-9]+")


def derive_seed(root: int, label: str) -> int:
    """Independent sub-seed for a labelled random stream."""
    ss = np.random.SeedSequence([int(root) & 0xFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(1)[0])


def tokenize(text: str, vocab: int) -> list[int]:
    """Whitespace words hashed into ids ``2 .. vocab-1`` (0 and 1 are BOS/SEP)."""
    return [2 + zlib.crc32(w.encode()) % (vocab - 2) for w in _WORD.findall(text.lower())]


@dataclass
class Sample:
    visual: np.ndarray  # P x d_vis
    text_ids: list[int]
    scene: int
    task: str
    teachers: TeacherFeatures | None = None


class SyntheticWorld:
    """A fixed set of scenes, each with a visual prototype, a caption and teacher features.

    Captions and teacher features are deterministic functions of the scene, so
    they are learnable from the visual tokens. The instruction task is a fixed
    token permutation chain, learnable by the FFN layers alone.
    """

    def __init__(
        self,
        seed: int,
        vocab: int = 64,
        d_vis: int = 48,
        n_scenes: int = 8,
        visual_tokens: int = 8,
        caption_len: int = 8,
        synergy_tokens: int = 4,
        temporal_dim: int = 12,
        spatial_dim: int = 10,
        noise: float = 0.1,
    ):
        rng = np.random.default_rng(derive_seed(seed, "world"))
        self.vocab = vocab
        self.d_vis = d_vis
        self.noise = noise
        self.n_scenes = n_scenes
        self.prototypes = rng.normal(size=(n_scenes, visual_tokens, d_vis))
        self.captions = [
            [BOS] + [int(t) for t in rng.integers(2, vocab, size=caption_len - 1)] for _ in range(n_scenes)
        ]
        self.successor = np.arange(vocab)
        self.successor[2:] = 2 + rng.permutation(vocab - 2)
        # 3D scenes: per-pixel coordinates of a small depth map, one pixel per visual token
        geo = GeoEncodingConfig(num_frequencies=d_vis // 6, output_dim=d_vis)
        width = max(1, visual_tokens // 2)
        height = visual_tokens // width
        self.coord_codes = []
        for _ in range(n_scenes):
            pts = lift_to_world(random_frame(rng, height, width))
            code = np.zeros((visual_tokens, d_vis))
            code[: height * width] = sinusoidal_encode(pts, geo).data
            self.coord_codes.append(code)
        teacher_root = derive_seed(seed, "teacher")
        self.teachers = [
            mock_teachers(teacher_root + s, synergy_tokens, temporal_dim, spatial_dim) for s in range(n_scenes)
        ]

    def _visual(self, rng: np.random.Generator, scene: int, with_coords: bool) -> np.ndarray:
        v = self.prototypes[scene] + self.noise * rng.normal(size=self.prototypes[scene].shape)
        if with_coords:
            v = v + self.coord_codes[scene]
        return v

    def caption(self, rng: np.random.Generator) -> Sample:
        s = int(rng.integers(self.n_scenes))
        return Sample(self._visual(rng, s, True), list(self.captions[s]), s, "caption")

    def instruction(self, rng: np.random.Generator, length: int = 10) -> Sample:
        s = int(rng.integers(self.n_scenes))
        tok = int(rng.integers(2, self.vocab))
        ids = [BOS]
        for _ in range(length - 1):
            ids.append(tok)
            tok = int(self.successor[tok])
        return Sample(self._visual(rng, s, False), ids, s, "instruction")

    def synergy(self, rng: np.random.Generator) -> Sample:
        s = int(rng.integers(self.n_scenes))
        return Sample(self._visual(rng, s, True), list(self.captions[s]), s, "synergy", self.teachers[s])

    def csqa(self, rng: np.random.Generator, questions: Sequence[tuple[str, str]], max_text: int = 20) -> Sample:
        s = int(rng.integers(self.n_scenes))
        q, a = questions[int(rng.integers(len(questions)))]
        ids = ([BOS] + tokenize(q, self.vocab) + [SEP] + tokenize(a, self.vocab))[:max_text]
        return Sample(self._visual(rng, s, False), ids, s, "csqa")

    def pool(self, stage: str, size: int, seed: int, questions=None, mix: float = 0.5) -> list[Sample]:
        """A fixed dataset of ``size`` samples for one training stage."""
        rng = np.random.default_rng(derive_seed(seed, f"data/{stage}"))
        if stage == "stage_1_1":
            return [self.caption(rng) for _ in range(size)]
        if stage == "stage_1_2":
            return [self.instruction(rng) for _ in range(size)]
        if stage == "stage_2_1":
            return [self.synergy(rng) for _ in range(size)]
        if stage == "stage_2_2":
            if not questions:
                raise DataError("stage_2_2 needs CSQA question/answer pairs")
            return [self.csqa(rng, questions) if rng.random() < mix else self.instruction(rng) for _ in range(size)]
        raise DataError(f"unknown stage {stage!r}")


def batches(pool: Sequence[Sample], batch_size: int, seed: int) -> Iterator[list[Sample]]:
    """Endless stream of batches drawn without replacement within each pass."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    while True:
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(len(pool)))
            batch.append(pool[order.pop()])
        yield batch
