""" Context-sensitive chunk geometry shared by the front-end and the back-end.

An utterance of ``T`` frames is cut into non-overlapping cores of ``chunk_frames`` frames (the
last may be short). Each core is spliced with ``left_frames`` of history and ``right_frames`` of
future; context that falls outside the utterance is recorded as padding and filled with zeros
in the feature domain.
"""
from __future__ import annotations

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from cuside_array.config import ContextMode, ContextPolicy, Stage
from cuside_array.errors import ChunkingError, ContextPolicyError, ShapeError


class ChunkDescriptor(BaseModel):
    """ Frame-index geometry of one chunk; ranges are half-open. """
    model_config = ConfigDict(frozen=True)

    index: int
    core_start: int
    core_end: int
    left_ctx_start: int
    right_ctx_end: int
    left_pad: int = 0
    right_pad: int = 0

    @model_validator(mode="after")
    def check_order(self) -> ChunkDescriptor:
        if not self.left_ctx_start <= self.core_start < self.core_end <= self.right_ctx_end:
            raise ValueError(f"inconsistent chunk ranges: {self}")
        if self.left_pad < 0 or self.right_pad < 0:
            raise ValueError("pads must be non-negative")
        return self

    @property
    def core_len(self) -> int:
        return self.core_end - self.core_start

    @property
    def left_len(self) -> int:
        """ Left-context frames including padding. """
        return self.core_start - self.left_ctx_start + self.left_pad

    @property
    def right_len(self) -> int:
        """ Right-context frames including padding. """
        return self.right_ctx_end - self.core_end + self.right_pad

    @property
    def length(self) -> int:
        return self.left_len + self.core_len + self.right_len

    @property
    def core_slice(self) -> slice:
        """ Positions of the core frames inside the extracted chunk. """
        return slice(self.left_len, self.left_len + self.core_len)

    def valid_mask(self) -> np.ndarray:
        """ True for positions holding real frames, False for padding. """
        mask = np.ones(self.length, dtype=bool)
        mask[:self.left_pad] = False
        mask[self.length - self.right_pad:] = False
        return mask

    def without_right_context(self) -> ChunkDescriptor:
        return self.model_copy(update={"right_ctx_end": self.core_end, "right_pad": 0})


class ChunkPlan(BaseModel):
    """ Ordered descriptors whose cores tile ``[0, total_frames)``. """
    model_config = ConfigDict(frozen=True)

    descriptors: list[ChunkDescriptor]
    total_frames: int
    chunk_frames: int
    left_frames: int
    right_frames: int

    @model_validator(mode="after")
    def check_coverage(self) -> ChunkPlan:
        position = 0
        for d in self.descriptors:
            if d.core_start != position:
                raise ValueError("cores must be contiguous and start at frame 0")
            position = d.core_end
        if position != self.total_frames:
            raise ValueError("cores must end at total_frames")
        return self

    def __len__(self) -> int:
        return len(self.descriptors)

    def __iter__(self):
        return iter(self.descriptors)

    def __getitem__(self, index: int) -> ChunkDescriptor:
        return self.descriptors[index]

    def core_index_map(self) -> list[slice]:
        """ For each chunk, where its core sits inside the extracted chunk. """
        return [d.core_slice for d in self.descriptors]


def plan_chunks(total_frames: int, chunk_frames: int, left_frames: int,
                right_frames: int) -> ChunkPlan:
    """ Splits ``total_frames`` into context-sensitive chunks.

    Args:
        total_frames: Utterance length in frames.
        chunk_frames: Core size; the last core may be shorter.
        left_frames: History spliced before each core.
        right_frames: Future spliced after each core.

    Returns:
        ChunkPlan: ``ceil(total_frames / chunk_frames)`` descriptors.

    Raises:
        ChunkingError: If a size is not positive or a context size is negative.
    """
    if chunk_frames < 1:
        raise ChunkingError(f"chunk_frames must be >= 1, got {chunk_frames}")
    if total_frames < 1:
        raise ChunkingError(f"total_frames must be >= 1, got {total_frames}")
    if left_frames < 0 or right_frames < 0:
        raise ChunkingError("context sizes must be non-negative")
    descriptors = [descriptor_at(index, chunk_frames, left_frames, right_frames, total_frames)
                   for index in range(-(-total_frames // chunk_frames))]
    return ChunkPlan(descriptors=descriptors, total_frames=total_frames,
                     chunk_frames=chunk_frames, left_frames=left_frames,
                     right_frames=right_frames)


def descriptor_at(index: int, chunk_frames: int, left_frames: int, right_frames: int,
                  total_frames: int | None = None) -> ChunkDescriptor:
    """ Geometry of chunk ``index``; ``total_frames=None`` means the stream has not ended. """
    core_start = index * chunk_frames
    core_end = core_start + chunk_frames
    want_left = core_start - left_frames
    want_right = core_end + right_frames
    if total_frames is None:
        right_ctx_end, right_pad = want_right, 0
    else:
        core_end = min(core_end, total_frames)
        want_right = core_end + right_frames
        right_ctx_end = min(total_frames, want_right)
        right_pad = max(0, want_right - total_frames)
    return ChunkDescriptor(index=index, core_start=core_start, core_end=core_end,
                           left_ctx_start=max(0, want_left), right_ctx_end=right_ctx_end,
                           left_pad=max(0, -want_left), right_pad=right_pad)


def shift_descriptor(d: ChunkDescriptor, offset: int) -> ChunkDescriptor:
    """ Same chunk addressed in a frame buffer that starts ``-offset`` frames later. """
    return ChunkDescriptor(index=d.index, core_start=d.core_start + offset,
                           core_end=d.core_end + offset,
                           left_ctx_start=d.left_ctx_start + offset,
                           right_ctx_end=d.right_ctx_end + offset,
                           left_pad=d.left_pad, right_pad=d.right_pad)


def jitter_chunk_size(base_frames: int, low_frames: int, high_frames: int,
                      rng: np.random.Generator) -> int:
    """ Uniform integer chunk size in ``[low_frames, high_frames]``. """
    if not low_frames <= base_frames <= high_frames:
        raise ChunkingError(f"need low <= base <= high, got {low_frames}, {base_frames}, "
                            f"{high_frames}")
    return int(rng.integers(low_frames, high_frames + 1))


def draw_context_mode(policy: ContextPolicy, rng: np.random.Generator) -> ContextMode:
    """ Draws a right-context mode from the policy.

    Raises:
        ContextPolicyError: If a front-end policy gives simulated context any probability.
    """
    if policy.stage is Stage.FRONTEND and policy.probabilities.get(ContextMode.SIMULATED, 0) > 0:
        raise ContextPolicyError("the front-end cannot use simulated right context")
    modes = list(policy.probabilities)
    probs = np.array([policy.probabilities[m] for m in modes])
    return modes[int(rng.choice(len(modes), p=probs / probs.sum()))]


def extract_chunk(frames: np.ndarray, d: ChunkDescriptor) -> np.ndarray:
    """ Slices one context-sensitive chunk, zero-filling padded positions.

    Args:
        frames: Array whose first axis is time, real or complex.
        d: Chunk geometry.

    Returns:
        np.ndarray: ``d.length`` frames; the core is bit-equal to the source.

    Raises:
        ShapeError: If the descriptor reaches past the sequence.
    """
    if d.right_ctx_end > frames.shape[0] or d.left_ctx_start < 0:
        raise ShapeError(f"chunk {d.index} spans [{d.left_ctx_start}, {d.right_ctx_end}) "
                         f"but the sequence has {frames.shape[0]} frames")
    body = frames[d.left_ctx_start:d.right_ctx_end]
    pad = [(d.left_pad, d.right_pad)] + [(0, 0)] * (frames.ndim - 1)
    return np.pad(body, pad)


def stitch_cores(chunks: list[np.ndarray], plan: ChunkPlan) -> np.ndarray:
    """ Concatenates the core frames of extracted chunks back into one sequence. """
    return np.concatenate([chunk[d.core_slice] for chunk, d in zip(chunks, plan)], axis=0)
