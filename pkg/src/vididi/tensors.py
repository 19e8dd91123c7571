"""Dense clip tensors and temporal finite-difference operators.

A clip is a (C, T, H, W) stack of frames. Forward differences along T
expose order-k motion: the first difference of a clip is its frame-to-
frame change (velocity analogue), the second difference the change of
that change (acceleration analogue). A time-constant additive component
of every frame is annihilated by the first difference, which is the
lever the whole training scheme rests on.

Differencing shortens clips, so the data pipeline samples T+2 frames
and truncates every derived view back to T (see ``derive_view``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class VideoTensor:
    """Immutable (C, T, H, W) frame stack, float64."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"expected (C, T, H, W) data, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise ValueError("clip must contain at least one frame")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[2]

    @property
    def width(self) -> int:
        return self.data.shape[3]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    def frame(self, n: int) -> np.ndarray:
        """The (C, H, W) frame at index n."""
        if not 0 <= n < self.frames:
            raise IndexError(f"frame index {n} out of range for {self.frames} frames")
        return self.data[:, n]


@dataclass(frozen=True)
class ClipBatch:
    """Ordered batch of equally shaped clips."""

    items: tuple[VideoTensor, ...]

    def __post_init__(self):
        items = tuple(self.items)
        if not items:
            raise ValueError("batch must contain at least one clip")
        shape = items[0].shape
        for i, clip in enumerate(items):
            if clip.shape != shape:
                raise ValueError(f"clip {i} has shape {clip.shape}, expected {shape}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        return self.items[0].shape

    def stack(self) -> np.ndarray:
        """(B, C, T, H, W) array."""
        return np.stack([clip.data for clip in self.items])


def diff1(x: VideoTensor) -> VideoTensor:
    """First forward difference along time: out(n) = x(n+1) - x(n)."""
    if x.frames < 2:
        raise ValueError("first difference needs at least 2 frames")
    return VideoTensor(x.data[:, 1:] - x.data[:, :-1])


def diff2(x: VideoTensor) -> VideoTensor:
    """Second forward difference: out(n) = x(n+2) - 2*x(n+1) + x(n).

    Evaluated as the difference of consecutive first differences, so it
    is bitwise identical to diff1(diff1(x)).
    """
    if x.frames < 3:
        raise ValueError("second difference needs at least 3 frames")
    d1 = x.data[:, 1:] - x.data[:, :-1]
    return VideoTensor(d1[:, 1:] - d1[:, :-1])


def taylor_reconstruct(x: VideoTensor, n: int, t: int) -> np.ndarray:
    """Rebuild frame t from the differences at n.

    Uses the Newton forward-difference form
        x(n) + (t-n) d1(n) + (t-n)(t-n-1)/2 d2(n),
    the discrete analogue of a second-order Taylor expansion. It is an
    exact identity for t in {n, n+1, n+2}, which is what the tests pin.
    """
    if not (0 <= n and n + 2 < x.frames):
        raise IndexError(f"need frames n..n+2 in range, got n={n} with {x.frames} frames")
    if t not in (n, n + 1, n + 2):
        raise IndexError(f"t must be one of n, n+1, n+2; got n={n}, t={t}")
    d1 = x.data[:, n + 1] - x.data[:, n]
    d2 = x.data[:, n + 2] - 2.0 * x.data[:, n + 1] + x.data[:, n]
    k = t - n
    return x.data[:, n] + k * d1 + (k * (k - 1) / 2.0) * d2


def truncate_frames(x: VideoTensor, t: int) -> VideoTensor:
    """Keep the first t frames."""
    if t < 1:
        raise ValueError("cannot truncate below one frame")
    if t > x.frames:
        raise ValueError(f"cannot truncate to {t} frames, clip has {x.frames}")
    return VideoTensor(x.data[:, :t])


def derive_view(x: VideoTensor, order: int, t_frames: int) -> VideoTensor:
    """Apply the order-k forward difference, then truncate to t_frames.

    Feeding T+2-frame clips keeps the output shape identical across
    orders 0, 1 and 2, so the encoder input never changes.
    """
    if order == 0:
        out = x
    elif order == 1:
        out = diff1(x)
    elif order == 2:
        out = diff2(x)
    else:
        raise ValueError(f"derivative order must be 0, 1 or 2, got {order}")
    return truncate_frames(out, t_frames)
