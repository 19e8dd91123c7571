"""Clip-wise spatio-temporal augmentation.

One set of random parameters is drawn per clip and applied identically
to every frame, so the two views of a video differ from each other but
each view is spatially coherent in time. Pipeline order: horizontal
flip, random-resized crop (bilinear), Gaussian blur, color jitter,
grayscale, then normalization last. Differentiation happens after all
of this, never before (see model._build_batch).

Every transform works on float64 (C, T, H, W) arrays in [0, 1] until
normalization. Color ops expect 3 RGB channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensors import VideoTensor


@dataclass(frozen=True)
class AugmentConfig:
    flip_prob: float = 0.5
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_aspect: tuple[float, float] = (3.0 / 4.0, 4.0 / 3.0)
    out_height: int = 112
    out_width: int = 112
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    jitter_prob: float = 0.8
    jitter_brightness: float = 0.2
    jitter_contrast: float = 0.2
    jitter_saturation: float = 0.2
    jitter_hue: float = 0.05
    gray_prob: float = 0.5
    norm_mean: tuple[float, ...] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, ...] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        for p_name in ("flip_prob", "blur_prob", "jitter_prob", "gray_prob"):
            p = getattr(self, p_name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{p_name} must lie in [0, 1], got {p}")
        if not 0.0 < self.crop_scale[0] <= self.crop_scale[1] <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < min <= max <= 1, got {self.crop_scale}")
        if not 0.0 < self.crop_aspect[0] <= self.crop_aspect[1]:
            raise ValueError(f"crop_aspect must be positive and ordered, got {self.crop_aspect}")
        if self.out_height < 1 or self.out_width < 1:
            raise ValueError("output size must be at least 1x1")
        if not 0.0 < self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"blur_sigma must be positive and ordered, got {self.blur_sigma}")
        if not 0.0 <= self.jitter_hue <= 0.5:
            raise ValueError("hue strength must lie in [0, 0.5]")
        if any(s <= 0.0 for s in self.norm_std):
            raise ValueError("normalization std must be strictly positive")


@dataclass(frozen=True)
class AugmentRecord:
    """Audit trail of the parameters applied to one clip.

    crop_rect is (x, y, w, h) in post-flip coordinates. jitter_factors
    is (brightness, contrast, saturation, hue_shift); jitter_order the
    application order of those four sub-transforms.
    """

    crop_rect: tuple[int, int, int, int]
    flipped: bool
    blur_sigma: float | None
    jitter_factors: tuple[float, float, float, float] | None
    jitter_order: tuple[int, ...] | None
    grayed: bool


def sample_clip_pair(
    video: VideoTensor, t_plus: int, stride: int, rng: np.random.Generator
) -> tuple[VideoTensor, VideoTensor]:
    """Two independent temporal windows of t_plus frames at the given stride."""
    if t_plus < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    window = (t_plus - 1) * stride + 1
    max_start = video.frames - window
    if max_start < 0:
        raise ValueError(
            f"video of {video.frames} frames too short for a window of {window}"
        )
    clips = []
    for _ in range(2):
        start = int(rng.integers(0, max_start + 1))
        idx = start + stride * np.arange(t_plus)
        clips.append(VideoTensor(video.data[:, idx]))
    return clips[0], clips[1]


def normalize(clip: VideoTensor, mean, std) -> VideoTensor:
    """out[c] = (in[c] - mean[c]) / std[c]."""
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    if mean.shape != (clip.channels,) or std.shape != (clip.channels,):
        raise ValueError(
            f"need one mean/std per channel ({clip.channels}), got {mean.shape}/{std.shape}"
        )
    if np.any(std <= 0.0):
        raise ValueError("normalization std must be strictly positive")
    return VideoTensor((clip.data - mean[:, None, None, None]) / std[:, None, None, None])


def _sample_crop_rect(
    rng: np.random.Generator, height: int, width: int, scale, aspect
) -> tuple[int, int, int, int]:
    """Area/log-aspect crop sampling with a center-crop fallback.

    Ten attempts at a rect with area fraction in ``scale`` and aspect
    in ``aspect``; if none fits, fall back to the largest centered rect
    whose aspect is clamped into range.
    """
    area = height * width
    log_lo, log_hi = math.log(aspect[0]), math.log(aspect[1])
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        ratio = math.exp(rng.uniform(log_lo, log_hi))
        w = round(math.sqrt(target * ratio))
        h = round(math.sqrt(target / ratio))
        if 0 < w <= width and 0 < h <= height:
            x = int(rng.integers(0, width - w + 1))
            y = int(rng.integers(0, height - h + 1))
            return x, y, w, h
    in_ratio = width / height
    if in_ratio < aspect[0]:
        w, h = width, min(height, round(width / aspect[0]))
    elif in_ratio > aspect[1]:
        h, w = height, min(width, round(height * aspect[1]))
    else:
        w, h = width, height
    return (width - w) // 2, (height - h) // 2, w, h


def _resize_bilinear(data: np.ndarray, rect: tuple[int, int, int, int], out_h: int, out_w: int) -> np.ndarray:
    """Crop ``rect`` out of (C, T, H, W) data and resize to (out_h, out_w).

    Half-pixel-center convention: source coord = (dst + 0.5) * scale - 0.5,
    sampling clamped to the crop region's edges.
    """
    x, y, w, h = rect

    def axis_coords(out_n: int, in_n: int, offset: int):
        src = (np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5
        src = np.clip(src, 0.0, in_n - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, in_n - 1)
        frac = src - lo
        return lo + offset, hi + offset, frac

    y0, y1, fy = axis_coords(out_h, h, y)
    x0, x1, fx = axis_coords(out_w, w, x)
    top = data[..., y0[:, None], x0[None, :]] * (1 - fx) + data[..., y0[:, None], x1[None, :]] * fx
    bot = data[..., y1[:, None], x0[None, :]] * (1 - fx) + data[..., y1[:, None], x1[None, :]] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]


def _gaussian_blur3(data: np.ndarray, sigma: float) -> np.ndarray:
    """Separable 3x3 blur with clamp-to-edge borders."""
    side = math.exp(-0.5 / (sigma * sigma))
    k = np.array([side, 1.0, side])
    k /= k.sum()
    padded = np.pad(data, ((0, 0), (0, 0), (1, 1), (0, 0)), mode="edge")
    data = k[0] * padded[..., :-2, :] + k[1] * padded[..., 1:-1, :] + k[2] * padded[..., 2:, :]
    padded = np.pad(data, ((0, 0), (0, 0), (0, 0), (1, 1)), mode="edge")
    return k[0] * padded[..., :-2] + k[1] * padded[..., 1:-1] + k[2] * padded[..., 2:]


_LUMA = np.array([0.299, 0.587, 0.114])


def _to_gray(data: np.ndarray) -> np.ndarray:
    """Luma-weighted (T, H, W) grayscale of (3, T, H, W) data."""
    return np.tensordot(_LUMA, data, axes=(0, 0))


def _rgb_to_hsv(data: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    r, g, b = data
    maxc = data.max(axis=0)
    minc = data.min(axis=0)
    v = maxc
    delta = maxc - minc
    s = np.where(maxc > 0.0, delta / np.where(maxc > 0.0, maxc, 1.0), 0.0)
    safe = np.where(delta > 0.0, delta, 1.0)
    h = np.zeros_like(maxc)
    h = np.where(maxc == r, ((g - b) / safe) % 6.0, h)
    h = np.where(maxc == g, (b - r) / safe + 2.0, h)
    h = np.where(maxc == b, (r - g) / safe + 4.0, h)
    h = np.where(delta > 0.0, h / 6.0, 0.0)
    return h, s, v


def _hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6)
    f = h6 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.intp) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def _apply_jitter(data: np.ndarray, factors, order) -> np.ndarray:
    """Brightness/contrast/saturation/hue in the drawn order, clamped to [0, 1]."""
    brightness, contrast, saturation, hue_shift = factors
    for op in order:
        if op == 0:
            data = np.clip(data * brightness, 0.0, 1.0)
        elif op == 1:
            mean = _to_gray(data).mean(axis=(1, 2))[None, :, None, None]
            data = np.clip(contrast * data + (1.0 - contrast) * mean, 0.0, 1.0)
        elif op == 2:
            gray = _to_gray(data)[None]
            data = np.clip(saturation * data + (1.0 - saturation) * gray, 0.0, 1.0)
        else:
            h, s, v = _rgb_to_hsv(data)
            data = np.clip(_hsv_to_rgb(h + hue_shift, s, v), 0.0, 1.0)
    return data


def spatial_augment(
    clip: VideoTensor, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[VideoTensor, AugmentRecord]:
    """Apply one randomly parameterized pipeline to every frame of a clip.

    Parameters are drawn in a fixed sequence from ``rng``, so identical
    (clip, cfg, seed) triples are bit-identical in output and record.
    """
    flipped = bool(rng.random() < cfg.flip_prob)
    rect = _sample_crop_rect(rng, clip.height, clip.width, cfg.crop_scale, cfg.crop_aspect)
    sigma = float(rng.uniform(*cfg.blur_sigma)) if rng.random() < cfg.blur_prob else None
    factors = None
    order = None
    if rng.random() < cfg.jitter_prob:
        factors = (
            float(rng.uniform(max(0.0, 1.0 - cfg.jitter_brightness), 1.0 + cfg.jitter_brightness)),
            float(rng.uniform(max(0.0, 1.0 - cfg.jitter_contrast), 1.0 + cfg.jitter_contrast)),
            float(rng.uniform(max(0.0, 1.0 - cfg.jitter_saturation), 1.0 + cfg.jitter_saturation)),
            float(rng.uniform(-cfg.jitter_hue, cfg.jitter_hue)),
        )
        order = tuple(int(i) for i in rng.permutation(4))
    grayed = bool(rng.random() < cfg.gray_prob)

    needs_color = (factors is not None) or grayed
    if needs_color and clip.channels != 3:
        raise ValueError("color jitter and grayscale need 3-channel clips")

    data = clip.data
    if flipped:
        data = data[..., ::-1]
    data = _resize_bilinear(data, rect, cfg.out_height, cfg.out_width)
    if sigma is not None:
        data = _gaussian_blur3(data, sigma)
    if factors is not None:
        data = _apply_jitter(data, factors, order)
    if grayed:
        data = np.broadcast_to(_to_gray(data)[None], data.shape).copy()
    out = normalize(VideoTensor(data), cfg.norm_mean, cfg.norm_std)
    record = AugmentRecord(
        crop_rect=rect,
        flipped=flipped,
        blur_sigma=sigma,
        jitter_factors=factors,
        jitter_order=order,
        grayed=grayed,
    )
    return out, record
