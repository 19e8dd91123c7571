"""Synthetic free-fall videos with known static and dynamic latents.

Each video is an additive scene: a time-constant value-noise background
(the static latent, shared per background class) plus a bright sprite
whose vertical center follows y(t) = y0 + v0*t - g*t^2/2. The gravity
g is drawn from a small set of "planets" and is the dynamic class
label; y0, v0, horizontal position and background intensity are
per-video nuisance. The sprite has a smooth cosine radial profile so
sub-pixel motion shows up in temporal derivatives, and amplitudes are
chosen so background + sprite never saturates, keeping the additive
structure exact.

The second difference of the center track is -g for every video, which
makes the "acceleration reveals gravity" story directly testable, and
the shortcut variant wires background class to gravity class on the
train split and to the wrong gravity class on the test split, so an
encoder that keys on background is measurably punished at retrieval.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .rng import stream
from .tensors import VideoTensor

DEFAULT_GRAVITIES = (0.02, 0.05, 0.08, 0.11)

_BG_LOW, _BG_HIGH = 0.05, 0.50
_BG_INTENSITY_JITTER = 0.04
_SPRITE_AMP = 0.40


@dataclass(frozen=True)
class SceneLatents:
    bg_class: int
    bg_seed: int
    bg_intensity: float
    y0: float
    v0: float
    g: float
    x0: float
    radius: float


@dataclass
class SynthVideo:
    video_id: str
    tensor: VideoTensor
    dynamic_label: int
    static_label: int
    split: str
    latents: SceneLatents
    out_of_bounds: bool


@dataclass
class SynthDataset:
    videos: list[SynthVideo]
    g_values: tuple[float, ...]
    bg_classes: int

    def split_videos(self, split: str) -> list[SynthVideo]:
        return [v for v in self.videos if v.split == split]


def center_track(latents: SceneLatents, frames: int) -> np.ndarray:
    """(T, 2) array of exact sub-pixel (row, col) sprite centers."""
    t = np.arange(frames, dtype=np.float64)
    rows = latents.y0 + latents.v0 * t - 0.5 * latents.g * t**2
    cols = np.full(frames, latents.x0)
    return np.stack([rows, cols], axis=1)


def render_background(latents: SceneLatents, h: int, w: int) -> np.ndarray:
    """Time-constant (3, h, w) value-noise texture for the scene.

    The coarse noise grid is keyed by the background class seed alone,
    so every video of a class shares the texture; the per-video
    intensity offset shifts it slightly.
    """
    rng = stream(latents.bg_seed, "texture")
    gh, gw = 5, 5
    coarse = rng.uniform(0.0, 1.0, size=(3, gh, gw))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(np.intp)
    y1 = np.minimum(y0 + 1, gh - 1)
    x0 = np.floor(xs).astype(np.intp)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = coarse[:, y0[:, None], x0[None, :]] * (1 - fx) + coarse[:, y0[:, None], x1[None, :]] * fx
    bot = coarse[:, y1[:, None], x0[None, :]] * (1 - fx) + coarse[:, y1[:, None], x1[None, :]] * fx
    noise = top * (1 - fy) + bot * fy
    return _BG_LOW + (_BG_HIGH - _BG_LOW) * noise + latents.bg_intensity


def render_sprite(center_row: float, center_col: float, radius: float, h: int, w: int) -> np.ndarray:
    """(h, w) cosine-falloff disk: amp/2 * (1 + cos(pi r / R)) inside r < R."""
    rows = np.arange(h, dtype=np.float64)[:, None] - center_row
    cols = np.arange(w, dtype=np.float64)[None, :] - center_col
    r = np.sqrt(rows**2 + cols**2)
    profile = 0.5 * _SPRITE_AMP * (1.0 + np.cos(np.pi * np.minimum(r, radius) / radius))
    return np.where(r < radius, profile, 0.0)


def render_frame(latents: SceneLatents, t: int, h: int, w: int) -> np.ndarray:
    """(3, h, w) frame: clip(background + sprite, 0, 1)."""
    if t < 0:
        raise ValueError("frame index must be non-negative")
    track = center_track(latents, t + 1)[t]
    sprite = render_sprite(track[0], track[1], latents.radius, h, w)
    return np.clip(render_background(latents, h, w) + sprite[None, :, :], 0.0, 1.0)


def render_video(latents: SceneLatents, frames: int, h: int, w: int) -> VideoTensor:
    bg = render_background(latents, h, w)
    track = center_track(latents, frames)
    data = np.empty((3, frames, h, w))
    for t in range(frames):
        sprite = render_sprite(track[t, 0], track[t, 1], latents.radius, h, w)
        data[:, t] = np.clip(bg + sprite[None], 0.0, 1.0)
    return VideoTensor(data)


def sprite_center_track(video: VideoTensor, background: np.ndarray) -> np.ndarray:
    """Estimate the (T, 2) sprite center track from rendered frames.

    Intensity-weighted centroid of the background-subtracted residual,
    averaged over channels. Accurate to well under a tenth of a pixel
    for unsaturated scenes.
    """
    residual = np.maximum(video.data - background[:, None], 0.0).mean(axis=0)
    t_frames, h, w = residual.shape
    rows = np.arange(h, dtype=np.float64)
    cols = np.arange(w, dtype=np.float64)
    mass = residual.sum(axis=(1, 2))
    if np.any(mass <= 0.0):
        raise ValueError("a frame contains no sprite mass")
    r = (residual.sum(axis=2) @ rows) / mass
    c = (residual.sum(axis=1) @ cols) / mass
    return np.stack([r, c], axis=1)


def _feasible(track: np.ndarray, radius: float, h: int) -> bool:
    margin = radius * 0.5
    return bool(np.all(track[:, 0] >= margin) and np.all(track[:, 0] <= h - 1 - margin))


def _draw_latents(
    rng: np.random.Generator,
    g: float,
    bg_class: int,
    bg_seed: int,
    frames: int,
    h: int,
    w: int,
    radius: float,
) -> tuple[SceneLatents, bool]:
    """Sample y0/v0 so the arc stays in frame; flag if that fails."""
    span = frames - 1
    for _ in range(50):
        v0 = 0.5 * g * span * rng.uniform(0.80, 1.20)
        peak = v0 * v0 / (2.0 * g) if g > 0 else 0.0
        y_lo = radius * 0.5
        y_hi = max(y_lo, h - 1 - radius * 0.5 - peak)
        y0 = rng.uniform(y_lo, y_hi)
        x0 = rng.uniform(radius, w - 1 - radius)
        intensity = rng.uniform(-_BG_INTENSITY_JITTER, _BG_INTENSITY_JITTER)
        latents = SceneLatents(
            bg_class=bg_class,
            bg_seed=bg_seed,
            bg_intensity=intensity,
            y0=y0,
            v0=v0,
            g=g,
            x0=x0,
            radius=radius,
        )
        if _feasible(center_track(latents, frames), radius, h):
            return latents, False
    return latents, True


def _assign_cells(
    n_videos: int, cells: list[tuple[int, int, str]]
) -> list[tuple[int, int, str]]:
    """Spread n_videos across cells as evenly as possible (within 1)."""
    base, extra = divmod(n_videos, len(cells))
    out = []
    for i, cell in enumerate(cells):
        out.extend([cell] * (base + (1 if i < extra else 0)))
    return out


def generate(
    n_videos: int,
    frames: int,
    h: int,
    w: int,
    g_values: tuple[float, ...] = DEFAULT_GRAVITIES,
    bg_classes: int = 4,
    seed: int = 0,
    *,
    shortcut: bool = False,
    train_frac: float = 0.5,
    radius: float = 4.0,
    workers: int = 1,
) -> SynthDataset:
    """Balanced labeled dataset of free-fall videos.

    Plain mode crosses every gravity class with every background class
    and splits each cell between train and test, so background carries
    no information about gravity. Shortcut mode instead pairs
    background class i with gravity class i on the train split and
    with gravity class i+1 (mod G) on the test split: background
    becomes perfectly predictive during training and systematically
    wrong at test time.
    """
    g_values = tuple(float(g) for g in g_values)
    n_g = len(g_values)
    if n_g < 1 or bg_classes < 1:
        raise ValueError("need at least one gravity and one background class")
    if shortcut:
        if bg_classes != n_g:
            raise ValueError("shortcut mode needs equal gravity and background class counts")
        n_train = round(n_videos * train_frac)
        n_test = n_videos - n_train
        if n_train < n_g or n_test < n_g:
            raise ValueError(
                f"cannot balance {n_videos} videos over {n_g} classes per split"
            )
        assignments = _assign_cells(n_train, [(gi, gi, "train") for gi in range(n_g)])
        assignments += _assign_cells(n_test, [(gi, (gi + 1) % n_g, "test") for gi in range(n_g)])
    else:
        cells = [(gi, bi) for gi in range(n_g) for bi in range(bg_classes)]
        if n_videos < len(cells):
            raise ValueError(f"{n_videos} videos cannot cover {len(cells)} class cells")
        per_cell = _assign_cells(n_videos, [c + ("",) for c in cells])
        counts: dict[tuple[int, int], int] = {}
        for gi, bi, _ in per_cell:
            counts[(gi, bi)] = counts.get((gi, bi), 0) + 1
        # first round(frac * count) videos of each cell go to train
        seen: dict[tuple[int, int], int] = {}
        assignments = []
        for gi, bi, _ in per_cell:
            j = seen.get((gi, bi), 0)
            seen[(gi, bi)] = j + 1
            n_train_cell = round(counts[(gi, bi)] * train_frac)
            assignments.append((gi, bi, "train" if j < n_train_cell else "test"))

    def build(idx: int) -> SynthVideo:
        gi, bi, split = assignments[idx]
        rng = stream(seed, "video", idx)
        latents, oob = _draw_latents(
            rng, g_values[gi], bi, _bg_seed(seed, bi), frames, h, w, radius
        )
        return SynthVideo(
            video_id=f"v{idx:04d}",
            tensor=render_video(latents, frames, h, w),
            dynamic_label=gi,
            static_label=bi,
            split=split,
            latents=latents,
            out_of_bounds=oob,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            videos = list(pool.map(build, range(len(assignments))))
    else:
        videos = [build(i) for i in range(len(assignments))]
    return SynthDataset(videos=videos, g_values=g_values, bg_classes=bg_classes)


def _bg_seed(seed: int, bg_class: int) -> int:
    return (int(seed) * 1000003 + bg_class) % (2**31)


# ---------------------------------------------------------------------------
# on-disk layout: one directory per video plus a JSON-lines manifest


def save_dataset(ds: SynthDataset, root: str | Path) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for video in ds.videos:
        vdir = root / video.video_id
        vdir.mkdir(exist_ok=True)
        save_tensors(vdir / "video.vddi", {"video": video.tensor.data})
        lines.append(
            json.dumps(
                {
                    "id": video.video_id,
                    "dims": list(video.tensor.shape),
                    "dynamic_label": video.dynamic_label,
                    "static_label": video.static_label,
                    "split": video.split,
                    "out_of_bounds": video.out_of_bounds,
                    "latents": asdict(video.latents),
                },
                sort_keys=True,
            )
        )
    header = json.dumps(
        {"g_values": list(ds.g_values), "bg_classes": ds.bg_classes, "count": len(ds.videos)},
        sort_keys=True,
    )
    (root / "manifest.jsonl").write_text(header + "\n" + "\n".join(lines) + "\n")


def load_dataset(root: str | Path) -> SynthDataset:
    root = Path(root)
    manifest = root / "manifest.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.jsonl under {root}")
    lines = manifest.read_text().splitlines()
    header = json.loads(lines[0])
    videos = []
    for line in lines[1:]:
        row = json.loads(line)
        tensors = load_tensors(root / row["id"] / "video.vddi")
        videos.append(
            SynthVideo(
                video_id=row["id"],
                tensor=VideoTensor(tensors["video"]),
                dynamic_label=int(row["dynamic_label"]),
                static_label=int(row["static_label"]),
                split=row["split"],
                latents=SceneLatents(**row["latents"]),
                out_of_bounds=bool(row["out_of_bounds"]),
            )
        )
    return SynthDataset(
        videos=videos,
        g_values=tuple(header["g_values"]),
        bg_classes=int(header["bg_classes"]),
    )
