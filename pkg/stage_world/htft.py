"""Streaming feature buffers and the temporal feature fusion block."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, Iterable, List, Optional, Tuple

import numpy as np

from stage_world import numerics as nx

DEFAULT_CAPACITY = 10
DEFAULT_OFFSETS = (-1, -5, -10)
DEFAULT_DROPOUT = 0.1


class StreamingBufferError(RuntimeError):
    """Raised on out-of-order pushes or step-index mismatches."""


@dataclass(frozen=True, eq=False)
class FeatureFrame:
    time_index: int
    step_index: int
    tokens: np.ndarray

    @property
    def nbytes(self) -> int:
        return int(self.tokens.nbytes)


@dataclass(frozen=True)
class SelectionSet:
    offsets: Tuple[int, ...] = DEFAULT_OFFSETS

    def __post_init__(self) -> None:
        object.__setattr__(self, "offsets", tuple(int(offset) for offset in self.offsets))
        if len(set(self.offsets)) != len(self.offsets):
            raise StreamingBufferError(f"selection offsets must be distinct, got {self.offsets}")
        if any(offset >= 0 for offset in self.offsets):
            raise StreamingBufferError(f"selection offsets must be negative, got {self.offsets}")

    def validate(self, capacity: int) -> None:
        if any(offset < -capacity for offset in self.offsets):
            raise StreamingBufferError(f"offsets {self.offsets} reach past a capacity-{capacity} buffer")


class StreamingBuffer1D:
    """Fixed-capacity FIFO of feature frames for one denoising step."""

    def __init__(self, capacity: int = DEFAULT_CAPACITY, step_index: Optional[int] = None) -> None:
        if capacity < 1:
            raise StreamingBufferError(f"capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.step_index = step_index
        self._frames: Deque[FeatureFrame] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._frames)

    def frames(self) -> List[FeatureFrame]:
        return list(self._frames)

    @property
    def newest_time(self) -> Optional[int]:
        return self._frames[-1].time_index if self._frames else None

    def push(self, frame: FeatureFrame) -> None:
        if self.step_index is not None and frame.step_index != self.step_index:
            raise StreamingBufferError(
                f"buffer for step {self.step_index} got a frame from step {frame.step_index}"
            )
        newest = self.newest_time
        if newest is not None and frame.time_index <= newest:
            raise StreamingBufferError(f"out-of-order push: time {frame.time_index} after {newest}")
        self._frames.append(frame)

    def clear(self) -> None:
        self._frames.clear()

    @property
    def nbytes(self) -> int:
        return sum(frame.nbytes for frame in self._frames)


def select_frames(buffer: StreamingBuffer1D, selection: SelectionSet) -> List[FeatureFrame]:
    """Entries at the selection offsets counted from the newest; deep offsets clamp to the oldest."""
    frames = buffer.frames()
    if not frames:
        return []
    chosen: List[FeatureFrame] = []
    seen: set[int] = set()
    for offset in selection.offsets:
        index = max(len(frames) + offset, 0)
        if index in seen:
            continue
        seen.add(index)
        chosen.append(frames[index])
    return chosen


def select(buffer: StreamingBuffer1D, selection: SelectionSet) -> np.ndarray:
    """Concatenated token rows of the selected frames; shape (0, d) or (0, 0) when empty."""
    frames = select_frames(buffer, selection)
    if not frames:
        return np.zeros((0, 0), dtype=np.float32)
    return np.concatenate([frame.tokens for frame in frames], axis=0)


class StreamingBuffer2D:
    """One FIFO per denoising step."""

    def __init__(self, n_steps: int, capacity: int = DEFAULT_CAPACITY) -> None:
        if n_steps < 1:
            raise StreamingBufferError(f"n_steps must be at least 1, got {n_steps}")
        self.n_steps = n_steps
        self.capacity = capacity
        self._buffers = [StreamingBuffer1D(capacity, step_index=step) for step in range(n_steps)]

    def step(self, step_index: int) -> StreamingBuffer1D:
        if not 0 <= step_index < self.n_steps:
            raise StreamingBufferError(f"step index {step_index} outside a {self.n_steps}-step buffer")
        return self._buffers[step_index]

    def push(self, frame: FeatureFrame) -> None:
        self.step(frame.step_index).push(frame)

    def reset(self) -> None:
        for buffer in self._buffers:
            buffer.clear()

    @property
    def nbytes(self) -> int:
        return sum(buffer.nbytes for buffer in self._buffers)

    def __len__(self) -> int:
        return sum(len(buffer) for buffer in self._buffers)


def make_buffers(sites: Iterable[str], n_steps: int, capacity: int = DEFAULT_CAPACITY) -> Dict[str, StreamingBuffer2D]:
    return {site: StreamingBuffer2D(n_steps, capacity) for site in sites}


def reset(buffers: StreamingBuffer2D | Dict[str, StreamingBuffer2D]) -> None:
    if isinstance(buffers, StreamingBuffer2D):
        buffers.reset()
        return
    for buffer in buffers.values():
        buffer.reset()


def to_tokens(features: nx.Tensor) -> nx.Tensor:
    """[c, h, w] features to [h*w, c] tokens."""
    channels, height, width = features.shape
    return nx.transpose(nx.reshape(features, (channels, height * width)))


def from_tokens(tokens: nx.Tensor, height: int, width: int) -> nx.Tensor:
    channels = tokens.shape[1]
    return nx.reshape(nx.transpose(tokens), (channels, height, width))


class FusionBlock:
    """Cross-attends current tokens to selected earlier-frame tokens at one site.

    out = dropout(f) + Linear(CrossAttn(Linear(GroupNorm(f)), F_e))
    """

    def __init__(self, site: str, dim: int, groups: int, dropout_p: float = DEFAULT_DROPOUT) -> None:
        if dim % groups:
            raise ValueError(f"fusion dim {dim} not divisible by {groups} groups")
        self.site = site
        self.dim = dim
        self.groups = groups
        self.dropout_p = dropout_p
        self.prefix = f"htft.{site}"

    def parameter_names(self) -> List[str]:
        return [
            f"{self.prefix}.norm.weight",
            f"{self.prefix}.norm.bias",
            f"{self.prefix}.in.weight",
            f"{self.prefix}.in.bias",
            f"{self.prefix}.attn.wq",
            f"{self.prefix}.attn.wk",
            f"{self.prefix}.attn.wv",
            f"{self.prefix}.out.weight",
            f"{self.prefix}.out.bias",
        ]

    def init_params(self, store: nx.ParamStore, rng: np.random.Generator) -> None:
        dim = self.dim
        std = 1.0 / np.sqrt(dim)
        store.add(f"{self.prefix}.norm.weight", np.ones(dim))
        store.add(f"{self.prefix}.norm.bias", np.zeros(dim))
        store.add(f"{self.prefix}.in.weight", rng.normal(0.0, std, (dim, dim)))
        store.add(f"{self.prefix}.in.bias", np.zeros(dim))
        store.add(f"{self.prefix}.attn.wq", rng.normal(0.0, std, (dim, dim)))
        store.add(f"{self.prefix}.attn.wk", rng.normal(0.0, std, (dim, dim)))
        store.add(f"{self.prefix}.attn.wv", rng.normal(0.0, std, (dim, dim)))
        # zero output projection: an untrained block is the identity
        store.add(f"{self.prefix}.out.weight", np.zeros((dim, dim)))
        store.add(f"{self.prefix}.out.bias", np.zeros(dim))

    def __call__(
        self,
        store: nx.ParamStore,
        tokens: nx.Tensor,
        selected: np.ndarray,
        train_mode: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> nx.Tensor:
        return fuse(tokens, selected, store, self.prefix, self.groups, train_mode, rng, self.dropout_p)


def fuse(
    tokens: nx.Tensor,
    selected: np.ndarray,
    store: nx.ParamStore,
    prefix: str,
    groups: int,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
    dropout_p: float = DEFAULT_DROPOUT,
) -> nx.Tensor:
    """Fuse [n, d] tokens with selected earlier tokens; identity when nothing is selected."""
    if selected.shape[0] == 0:
        return tokens
    if selected.shape[1] != tokens.shape[1]:
        raise nx.ShapeError(f"fusion token dim {tokens.shape[1]} vs cached dim {selected.shape[1]}")
    normed = nx.transpose(
        nx.group_norm(
            nx.transpose(tokens),
            groups,
            weight=store[f"{prefix}.norm.weight"],
            bias=store[f"{prefix}.norm.bias"],
        )
    )
    query = nx.linear(normed, store[f"{prefix}.in.weight"], store[f"{prefix}.in.bias"])
    attended = nx.cross_attention(
        query,
        nx.Tensor(selected),
        store[f"{prefix}.attn.wq"],
        store[f"{prefix}.attn.wk"],
        store[f"{prefix}.attn.wv"],
    )
    update = nx.linear(attended, store[f"{prefix}.out.weight"], store[f"{prefix}.out.bias"])
    return nx.add(nx.dropout(tokens, dropout_p, rng, train_mode), update)


def buffer_memory(buffers: Dict[str, StreamingBuffer2D]) -> int:
    return sum(buffer.nbytes for buffer in buffers.values())

