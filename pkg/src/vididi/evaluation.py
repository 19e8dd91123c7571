"""Retrieval, clustering and probing metrics over frozen embeddings.

After pretraining the projection (and predictor) heads are discarded:
a video is represented by the mean encoder feature over several
uniformly spaced clips, preprocessed with a crop and normalization
only. Retrieval ranks a database by cosine distance; clustering
quality is the classic silhouette score; the linear probe is a
multinomial logistic regression trained on frozen features.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .augment import AugmentConfig, normalize, _sample_crop_rect, _resize_bilinear
from .model import Model, ParamSet, forward
from .tensors import VideoTensor


@dataclass
class LabeledEmbeddings:
    vectors: np.ndarray  # (N, D)
    labels: np.ndarray  # (N,) int class ids
    split: np.ndarray  # (N,) "train" / "test"

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=object)
        n = self.vectors.shape[0]
        if n < 1 or self.labels.shape != (n,) or self.split.shape != (n,):
            raise ValueError("vectors, labels and split must agree on N >= 1")

    def subset(self, split: str) -> "LabeledEmbeddings":
        mask = self.split == split
        return LabeledEmbeddings(self.vectors[mask], self.labels[mask], self.split[mask])


def _preprocess_clip(clip: VideoTensor, cfg: AugmentConfig, rng: np.random.Generator | None) -> np.ndarray:
    """Crop + resize + normalize, nothing else.

    With no generator this is the deterministic center crop (largest
    rect with the output aspect); with one it is a random resized crop.
    """
    if rng is None:
        out_ratio = cfg.out_width / cfg.out_height
        in_ratio = clip.width / clip.height
        if in_ratio > out_ratio:
            h = clip.height
            w = min(clip.width, round(h * out_ratio))
        else:
            w = clip.width
            h = min(clip.height, round(w / out_ratio))
        rect = ((clip.width - w) // 2, (clip.height - h) // 2, w, h)
    else:
        rect = _sample_crop_rect(rng, clip.height, clip.width, cfg.crop_scale, cfg.crop_aspect)
    data = _resize_bilinear(clip.data, rect, cfg.out_height, cfg.out_width)
    return normalize(VideoTensor(data), cfg.norm_mean, cfg.norm_std).data


def embed_video(
    video: VideoTensor,
    model: Model,
    pset: ParamSet,
    cfg: AugmentConfig,
    t_frames: int,
    stride: int,
    clips: int = 10,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Mean encoder feature over uniformly spaced clips of the video.

    Clips are order-0 views of t_frames frames at the configured
    stride; starts are evenly spaced over the valid range. The default
    is the deterministic center crop; pass a generator for the random
    crop variant.
    """
    if clips < 1:
        raise ValueError("need at least one clip")
    window = (t_frames - 1) * stride + 1
    if video.frames < window:
        raise ValueError(f"video of {video.frames} frames too short for a window of {window}")
    starts = np.round(np.linspace(0, video.frames - window, clips)).astype(int)
    batch = np.stack(
        [
            _preprocess_clip(VideoTensor(video.data[:, s + stride * np.arange(t_frames)]), cfg, rng)
            for s in starts
        ]
    )
    features, _ = forward(model, pset, batch, heads=("encoder",), want_tape=False)
    return features.mean(axis=0)


def knn_recall(
    db: LabeledEmbeddings,
    queries: LabeledEmbeddings,
    ks: tuple[int, ...] = (1, 5, 10),
    metric: str = "cosine",
) -> dict[int, float]:
    """recall@k: fraction of queries with a same-class item in the top k.

    Ranking is by cosine distance by default (euclidean available);
    ties break toward the lower database index.
    """
    if db.vectors.shape[1] != queries.vectors.shape[1]:
        raise ValueError(
            f"dimension mismatch: db {db.vectors.shape[1]} vs queries {queries.vectors.shape[1]}"
        )
    if metric == "cosine":
        dbn = db.vectors / np.linalg.norm(db.vectors, axis=1, keepdims=True)
        qn = queries.vectors / np.linalg.norm(queries.vectors, axis=1, keepdims=True)
        dist = 1.0 - qn @ dbn.T
    elif metric == "euclidean":
        dist = np.linalg.norm(queries.vectors[:, None, :] - db.vectors[None, :, :], axis=2)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    ranking = np.argsort(dist, axis=1, kind="stable")
    ranked_labels = db.labels[ranking]
    out = {}
    for k in ks:
        kk = min(k, db.labels.shape[0])
        hits = (ranked_labels[:, :kk] == queries.labels[:, None]).any(axis=1)
        out[int(k)] = float(hits.mean())
    return out


def silhouette(emb: LabeledEmbeddings) -> float:
    """Mean of (b - a) / max(a, b) with euclidean distances.

    a is the mean distance to the point's own class (excluding itself),
    b the smallest mean distance to any other class. Singleton-class
    points score 0, as does the degenerate a = b = 0 case.
    """
    x = emb.vectors
    labels = emb.labels
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("silhouette needs at least two classes")
    if not np.any(np.bincount(labels - labels.min()) >= 2):
        raise ValueError("silhouette needs at least one class with two points")
    dist = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=2)
    scores = np.zeros(x.shape[0])
    for i in range(x.shape[0]):
        own = labels == labels[i]
        n_own = own.sum() - 1
        if n_own == 0:
            continue
        a = dist[i, own].sum() / n_own
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        denom = max(a, b)
        scores[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return float(scores.mean())


def linear_probe(
    train: LabeledEmbeddings,
    test: LabeledEmbeddings,
    epochs: int = 300,
    lr: float = 0.5,
    seed: int = 0,
) -> float:
    """Multinomial logistic regression on frozen features; top-1 accuracy."""
    if train.vectors.shape[0] == 0 or test.vectors.shape[0] == 0:
        raise ValueError("both splits must be non-empty")
    classes = np.unique(np.concatenate([train.labels, test.labels]))
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[c] for c in train.labels])
    n_classes = classes.size

    mu = train.vectors.mean(axis=0)
    sd = train.vectors.std(axis=0)
    sd[sd == 0.0] = 1.0
    xt = (train.vectors - mu) / sd
    xq = (test.vectors - mu) / sd

    rng = np.random.default_rng(seed)
    w = rng.normal(scale=0.01, size=(xt.shape[1], n_classes))
    b = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    n = xt.shape[0]
    for _ in range(epochs):
        logits = xt @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / n
        w -= lr * (xt.T @ g)
        b -= lr * g.sum(axis=0)
    pred = classes[np.argmax(xq @ w + b, axis=1)]
    return float((pred == test.labels).mean())


def pca2d(emb: LabeledEmbeddings | np.ndarray) -> np.ndarray:
    """Project onto the top-2 principal components of the centered data.

    Component signs are fixed by making each loading vector's largest-
    magnitude coordinate positive, so the output is deterministic.
    """
    x = emb.vectors if isinstance(emb, LabeledEmbeddings) else np.asarray(emb, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least two points")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2] if vt.shape[0] >= 2 else np.vstack([vt, np.zeros((2 - vt.shape[0], x.shape[1]))])
    for i in range(comps.shape[0]):
        j = np.argmax(np.abs(comps[i]))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return centered @ comps.T


# ---------------------------------------------------------------------------
# CSV exchange format: id,label,split,v0..v{D-1}


def save_embeddings_csv(
    path: str | Path,
    ids: list[str],
    emb: LabeledEmbeddings,
) -> None:
    d = emb.vectors.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "split"] + [f"v{i}" for i in range(d)])
        for i, vid in enumerate(ids):
            writer.writerow(
                [vid, int(emb.labels[i]), emb.split[i]] + [repr(float(v)) for v in emb.vectors[i]]
            )


def load_embeddings_csv(path: str | Path) -> tuple[list[str], LabeledEmbeddings]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[:3] != ["id", "label", "split"]:
        raise ValueError(f"{path}: unexpected embeddings header {header[:3]}")
    ids = []
    labels = []
    splits = []
    vectors = []
    for row in rows[1:]:
        ids.append(row[0])
        labels.append(int(row[1]))
        splits.append(row[2])
        vectors.append([float(v) for v in row[3:]])
    return ids, LabeledEmbeddings(np.array(vectors), np.array(labels), np.array(splits, dtype=object))
