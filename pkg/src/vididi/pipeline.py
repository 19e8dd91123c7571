"""End-to-end runs: train, embed, score, compare.

This is the layer both the CLI and the test-suite experiments call, so
a command-line run and an in-process run are the same code path.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from statistics import mean, stdev

import numpy as np

from . import checkpoint
from .config import ExperimentConfig, with_overrides
from .evaluation import LabeledEmbeddings, embed_video, knn_recall, linear_probe, pca2d, silhouette
from .model import Model, ParamSet, StepLog, TrainResult, build_model, train
from .rng import stream
from .synthdata import SynthDataset
from .tensors import VideoTensor


@dataclass
class EmbeddingTable:
    ids: list[str]
    vectors: np.ndarray
    dynamic_labels: np.ndarray
    static_labels: np.ndarray
    split: np.ndarray

    def labeled(self, kind: str) -> LabeledEmbeddings:
        if kind == "dynamic":
            labels = self.dynamic_labels
        elif kind == "static":
            labels = self.static_labels
        else:
            raise ValueError(f"label kind must be dynamic or static, got {kind!r}")
        return LabeledEmbeddings(self.vectors, labels, self.split)


def train_on_dataset(cfg: ExperimentConfig, ds: SynthDataset, *, force_epsilon: float | None = None) -> TrainResult:
    """Pretrain on the dataset's train split."""
    videos = [v.tensor for v in ds.split_videos("train")]
    return train(videos, cfg, force_epsilon=force_epsilon)


def embed_dataset(
    ds: SynthDataset,
    model: Model,
    pset: ParamSet,
    cfg: ExperimentConfig,
    *,
    workers: int = 1,
    random_crop_seed: int | None = None,
) -> EmbeddingTable:
    """Encoder features for every video, any split.

    Each video embeds independently from a stream keyed by its index,
    so the result does not depend on the worker count.
    """

    def one(idx: int) -> np.ndarray:
        rng = None
        if random_crop_seed is not None:
            rng = stream(random_crop_seed, "evalcrop", idx)
        return embed_video(
            ds.videos[idx].tensor,
            model,
            pset,
            cfg.augment,
            cfg.t_frames,
            cfg.stride,
            clips=cfg.eval.clips_per_video,
            rng=rng,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            vectors = list(pool.map(one, range(len(ds.videos))))
    else:
        vectors = [one(i) for i in range(len(ds.videos))]
    return EmbeddingTable(
        ids=[v.video_id for v in ds.videos],
        vectors=np.stack(vectors),
        dynamic_labels=np.array([v.dynamic_label for v in ds.videos]),
        static_labels=np.array([v.static_label for v in ds.videos]),
        split=np.array([v.split for v in ds.videos], dtype=object),
    )


def retrieval_metrics(table: EmbeddingTable, kind: str, ks: tuple[int, ...]) -> dict[int, float]:
    emb = table.labeled(kind)
    return knn_recall(emb.subset("train"), emb.subset("test"), ks)


def evaluation_report(table: EmbeddingTable, kind: str, cfg: ExperimentConfig, probe_seed: int = 0) -> dict:
    """All scalar metrics for one label kind, as report key=value pairs."""
    emb = table.labeled(kind)
    recalls = knn_recall(emb.subset("train"), emb.subset("test"), tuple(cfg.eval.ks))
    out = {"labels": kind, "n_db": len(emb.subset("train").labels), "n_queries": len(emb.subset("test").labels)}
    for k, v in recalls.items():
        out[f"recall@{k}"] = v
    out["silhouette"] = silhouette(emb)
    out["probe_accuracy"] = linear_probe(emb.subset("train"), emb.subset("test"), seed=probe_seed)
    return out


LOG_FIXED_COLUMNS = ["step", "epoch", "order_a", "order_b", "lr", "tau", "loss"]


def write_train_log(path: str | Path, logs: list[StepLog]) -> None:
    term_names = sorted(logs[0].terms) if logs else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_FIXED_COLUMNS + [f"term_{t}" for t in term_names])
        for row in logs:
            writer.writerow(
                [row.step, row.epoch, row.order_a, row.order_b, repr(row.lr), repr(row.tau), repr(row.loss)]
                + [repr(row.terms[t]) for t in term_names]
            )


def save_checkpoint(path: str | Path, pset: ParamSet) -> None:
    tensors = dict(pset.values)
    if pset.target is not None:
        tensors.update({f"target.{name}": v for name, v in pset.target.items()})
    checkpoint.save_tensors(path, tensors)


def load_checkpoint(path: str | Path, cfg: ExperimentConfig, channels: int = 3) -> tuple[Model, ParamSet]:
    """Rebuild the model from the config and load matching tensors."""
    tensors = checkpoint.load_tensors(path)
    input_dim = channels * cfg.augment.out_height * cfg.augment.out_width
    model = build_model(cfg.net, cfg.objective, input_dim)
    expected = {
        name: shape
        for stack in model.stacks.values()
        for layer in stack
        for name, shape, _ in layer.param_specs()
    }
    values = {}
    for name, shape in expected.items():
        if name not in tensors:
            raise ValueError(f"checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise ValueError(
                f"checkpoint tensor {name!r} has shape {tensors[name].shape}, model expects {shape}"
            )
        values[name] = tensors[name]
    pset = ParamSet(values)
    target = {name[len("target.") :]: v for name, v in tensors.items() if name.startswith("target.")}
    if target:
        pset.target = target
    return model, pset


@dataclass
class CompareRow:
    seed: int
    schedule: str
    dynamic_recall1: float
    static_recall1: float


def run_compare(
    cfg: ExperimentConfig,
    ds: SynthDataset,
    seeds: list[int],
    schedules: tuple[str, ...] = ("base", "vididi"),
) -> list[CompareRow]:
    """Matched-seed schedule comparison on one dataset.

    For every seed the schedules share initialization, batch order and
    augmentation draws; only the derivative-pair policy differs.
    """
    rows = []
    for seed in seeds:
        for sched in schedules:
            run_cfg = with_overrides(cfg, schedule=sched, seed=seed)
            result = train_on_dataset(run_cfg, ds)
            table = embed_dataset(ds, result.model, result.params, run_cfg)
            dyn = retrieval_metrics(table, "dynamic", (1,))[1]
            stat = retrieval_metrics(table, "static", (1,))[1]
            rows.append(CompareRow(seed=seed, schedule=sched, dynamic_recall1=dyn, static_recall1=stat))
    return rows


def summarize_compare(rows: list[CompareRow], schedules: tuple[str, ...] = ("base", "vididi")) -> dict:
    """mean and sd of each recall per schedule."""
    out = {}
    for sched in schedules:
        dyn = [r.dynamic_recall1 for r in rows if r.schedule == sched]
        stat = [r.static_recall1 for r in rows if r.schedule == sched]
        out[sched] = {
            "dynamic_recall1_mean": mean(dyn),
            "dynamic_recall1_sd": stdev(dyn) if len(dyn) > 1 else 0.0,
            "static_recall1_mean": mean(stat),
            "static_recall1_sd": stdev(stat) if len(stat) > 1 else 0.0,
            "seeds": len(dyn),
        }
    return out


def pca_scatter_data(table: EmbeddingTable, kind: str) -> tuple[np.ndarray, np.ndarray]:
    coords = pca2d(table.labeled(kind))
    labels = table.labeled(kind).labels
    return coords, labels
