"""Block-wise stitching of a fixed camera rig with linear blending between blocks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError
from .pipeline import PipelineConfig, run

log = logging.getLogger(__name__)

BLOCK = 35
OVERLAP = 15


@dataclass(frozen=True)
class BlockSchedule:
    """Blocks start every ``block - overlap`` frames from frame 0; only complete blocks are solved."""

    n_frames: int
    block: int = BLOCK
    overlap: int = OVERLAP

    def __post_init__(self):
        if self.block <= 0 or self.overlap < 0 or self.overlap >= self.block:
            raise InvalidInputError(f"need 0 <= overlap < block, got block={self.block} overlap={self.overlap}")
        if self.n_frames <= 0:
            raise InvalidInputError("video has no frames")

    @property
    def stride(self):
        return self.block - self.overlap

    @property
    def starts(self) -> list[int]:
        """First frame of every solved block."""
        if self.n_frames < self.block:
            return [0]
        return list(range(0, self.n_frames - self.block + 1, self.stride))

    def weights(self, f) -> tuple[int, int, float]:
        """``(k, k1, w)``: frame ``f`` uses ``(1 - w) * block_k + w * block_k1``."""
        if not 0 <= f < self.n_frames:
            raise InvalidInputError(f"frame {f} outside 0..{self.n_frames - 1}")
        starts = self.starts
        k = max(i for i, s in enumerate(starts) if s <= f)
        if k > 0 and f < starts[k] + self.overlap:
            # overlap of blocks k-1 and k
            return k - 1, k, (f - starts[k] + 1) / (self.overlap + 1)
        # frames past the last complete block reuse its parameters
        return k, k, 0.0


@dataclass(eq=False)
class VideoResult:
    schedule: BlockSchedule
    blocks: list  # PipelineResult per solved block
    vertices: list = field(default_factory=list)  # per frame: {image_id: (n, 2)}

    def frame_meshes(self, f):
        base = self.blocks[0].final.meshes
        return [m.with_warped(self.vertices[f][m.image_id]) for m in base]


def blend_vertices(a: dict, b: dict, w: float) -> dict:
    # written as a step from a so that identical blocks blend to themselves bit for bit
    return {k: np.asarray(a[k]) + w * (np.asarray(b[k]) - np.asarray(a[k])) for k in a}


def stitch_video(frames, block=BLOCK, overlap=OVERLAP, config: PipelineConfig | None = None,
                 mode="piecewise") -> VideoResult:
    """Solve the first frame of each block and interpolate vertex positions across overlaps.

    ``frames`` is a sequence of scenes sharing one rig (same images and sizes).
    """
    frames = list(frames)
    sched = BlockSchedule(len(frames), block, overlap)
    ref_ids = [(im.id, im.width, im.height) for im in frames[0].images]
    for s in sched.starts:
        if [(im.id, im.width, im.height) for im in frames[s].images] != ref_ids:
            raise InvalidInputError(f"frame {s} does not share the rig of frame 0")
    blocks = []
    for s in sched.starts:
        log.info("solving block starting at frame %d", s)
        blocks.append(run(frames[s], config, mode))
    verts = [b.final.vertices() for b in blocks]
    per_frame = []
    for f in range(sched.n_frames):
        k, k1, w = sched.weights(f)
        per_frame.append(verts[k] if k == k1 else blend_vertices(verts[k], verts[k1], w))
    return VideoResult(sched, blocks, per_frame)
