"""Command-line surface: generate data, train, evaluate, compare.

Exit codes: 0 success, 1 runtime failure (I/O, divergence, shape
mismatch), 2 usage or configuration error. ``VIDIDI_SEED`` is the
seed fallback when neither a flag nor the config file provides one.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from . import config as cfgmod
from . import pipeline, report
from .config import ConfigError, ExperimentConfig
from .model import DivergenceError
from .synthdata import DEFAULT_GRAVITIES, generate, load_dataset, save_dataset


def _env_seed() -> int | None:
    raw = os.environ.get("VIDIDI_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise click.UsageError(f"VIDIDI_SEED must be an integer, got {raw!r}")


def _resolve_seed(flag: int | None, default: int = 0) -> int:
    if flag is not None:
        return flag
    env = _env_seed()
    return env if env is not None else default


def _load_config(path: str, overrides: tuple[str, ...], seed: int | None, epochs: int | None) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise click.UsageError(f"cannot read config {path}: {exc}")
    try:
        cfg = cfgmod.loads(text)
        file_has_seed = "seed" in cfgmod.raw_keys(text)
        for spec in overrides:
            cfg = cfgmod.apply_override(cfg, spec)
        if epochs is not None:
            cfg = cfgmod.with_overrides(cfg, epochs=epochs)
        override_has_seed = any(o.split("=")[0].strip() == "seed" for o in overrides)
        if seed is not None:
            cfg = cfgmod.with_overrides(cfg, seed=seed)
        elif not file_has_seed and not override_has_seed:
            env = _env_seed()
            if env is not None:
                cfg = cfgmod.with_overrides(cfg, seed=env)
        cfgmod.validate(cfg)
        return cfg
    except ConfigError as exc:
        raise click.UsageError(str(exc))


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
def main():
    """Video dynamics pretraining on synthetic free-fall data."""


@main.command("init-config")
@click.option("-o", "--out", default="config.toml", show_default=True, help="Where to write the config.")
@click.option("--desk", is_flag=True, help="Desk-scale preset sized for the synthetic data.")
def cmd_init_config(out: str, desk: bool):
    """Write a starter configuration file."""
    cfg = cfgmod.desk_preset() if desk else ExperimentConfig()
    try:
        cfgmod.save(cfg, out)
    except OSError as exc:
        _fail(f"cannot write {out}: {exc}")
    click.echo(f"wrote {out}")


@main.command("generate")
@click.option("--videos", type=int, required=True, help="Total number of videos.")
@click.option("--g-classes", type=int, default=4, show_default=True, help="Number of gravity classes.")
@click.option("--bg-classes", type=int, default=4, show_default=True, help="Number of background classes.")
@click.option("--frames", type=int, default=32, show_default=True)
@click.option("--size", type=int, default=32, show_default=True, help="Frame height and width.")
@click.option("--seed", type=int, default=None, help="Generation seed (falls back to VIDIDI_SEED).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--shortcut", is_flag=True, help="Correlate background with gravity on train, anti on test.")
@click.option("--train-frac", type=float, default=0.5, show_default=True)
@click.option("--radius", type=float, default=4.0, show_default=True, help="Sprite radius in pixels.")
@click.option("--workers", type=int, default=1, show_default=True)
def cmd_generate(videos, g_classes, bg_classes, frames, size, seed, out_dir, shortcut, train_frac, radius, workers):
    """Render a labeled synthetic dataset to disk."""
    if g_classes < 1 or g_classes > len(DEFAULT_GRAVITIES):
        raise click.UsageError(f"--g-classes must be 1..{len(DEFAULT_GRAVITIES)}")
    if not 0.0 < train_frac < 1.0:
        raise click.UsageError("--train-frac must lie strictly between 0 and 1")
    seed = _resolve_seed(seed)
    try:
        ds = generate(
            videos,
            frames,
            size,
            size,
            DEFAULT_GRAVITIES[:g_classes],
            bg_classes,
            seed,
            shortcut=shortcut,
            train_frac=train_frac,
            radius=radius,
            workers=workers,
        )
    except ValueError as exc:
        raise click.UsageError(str(exc))
    try:
        save_dataset(ds, out_dir)
    except OSError as exc:
        _fail(f"cannot write dataset: {exc}")
    n_train = len(ds.split_videos("train"))
    n_test = len(ds.split_videos("test"))
    flagged = sum(v.out_of_bounds for v in ds.videos)
    click.echo(
        f"wrote {len(ds.videos)} videos to {out_dir} "
        f"(train={n_train}, test={n_test}, g-classes={g_classes}, bg-classes={bg_classes}, "
        f"shortcut={'yes' if shortcut else 'no'}, out-of-bounds={flagged})"
    )


@main.command("train")
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=False))
@click.option("--override", multiple=True, help="KEY=VALUE config override; repeatable.")
@click.option("--seed", type=int, default=None, help="Training seed override.")
@click.option("--epochs", type=int, default=None, help="Epoch count override.")
@click.option("--freeze-random-diff", is_flag=True, help="Disable the random derivative increment.")
@click.option("-o", "--out", "out_dir", default="runs/train", show_default=True, type=click.Path())
def cmd_train(config_path, override, seed, epochs, freeze_random_diff, out_dir):
    """Pretrain on the configured dataset; write checkpoint, log and figure."""
    cfg = _load_config(config_path, override, seed, epochs)
    try:
        ds = load_dataset(cfg.dataset)
    except (OSError, ValueError) as exc:
        _fail(f"cannot load dataset {cfg.dataset}: {exc}")
    force_eps = 1.0 if freeze_random_diff else None
    try:
        result = pipeline.train_on_dataset(cfg, ds, force_epsilon=force_eps)
    except DivergenceError as exc:
        _fail(str(exc))
    except ValueError as exc:
        raise click.UsageError(str(exc))
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        pipeline.save_checkpoint(out / "checkpoint.vddi", result.params)
        pipeline.write_train_log(out / "train_log.csv", result.logs)
        cfgmod.save(cfg, out / "config.toml")
        report.loss_curve(
            out / "loss_curve.svg",
            [r.step for r in result.logs],
            [r.loss for r in result.logs],
            title=f"{cfg.objective} / {cfg.schedule}",
        )
    except OSError as exc:
        _fail(f"cannot write outputs: {exc}")
    final = result.logs[-1].loss if result.logs else float("nan")
    click.echo(f"trained {len(result.logs)} steps; final loss {final:.6g}; outputs in {out}")


@main.command("eval")
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=False))
@click.option("-k", "--checkpoint", "ckpt_path", required=True, type=click.Path(exists=False))
@click.option("-d", "--dataset", "dataset_path", default=None, help="Defaults to the config dataset.")
@click.option("--labels", type=click.Choice(["dynamic", "static"]), default="dynamic", show_default=True)
@click.option("--override", multiple=True, help="KEY=VALUE config override; repeatable.")
@click.option("--random-crop", is_flag=True, help="Random crops instead of the center crop.")
@click.option("--seed", type=int, default=None, help="Seed for --random-crop.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--svg/--no-svg", default=True, show_default=True, help="Render the 2-D embedding scatter.")
@click.option("-o", "--out", "out_dir", default="runs/eval", show_default=True, type=click.Path())
def cmd_eval(config_path, ckpt_path, dataset_path, labels, override, random_crop, seed, workers, svg, out_dir):
    """Embed every video and report retrieval, clustering and probe metrics."""
    cfg = _load_config(config_path, override, None, None)
    try:
        ds = load_dataset(dataset_path or cfg.dataset)
    except (OSError, ValueError) as exc:
        _fail(f"cannot load dataset: {exc}")
    try:
        model, pset = pipeline.load_checkpoint(ckpt_path, cfg, channels=ds.videos[0].tensor.channels)
    except FileNotFoundError as exc:
        _fail(str(exc))
    except ValueError as exc:
        _fail(f"checkpoint/config mismatch: {exc}")
    crop_seed = _resolve_seed(seed) if random_crop else None
    try:
        table = pipeline.embed_dataset(ds, model, pset, cfg, workers=workers, random_crop_seed=crop_seed)
    except ValueError as exc:
        _fail(str(exc))
    metrics = pipeline.evaluation_report(table, labels, cfg)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        report.write_report(out / "report.txt", metrics)
        from .evaluation import save_embeddings_csv

        save_embeddings_csv(out / "embeddings.csv", table.ids, table.labeled(labels))
        if svg:
            coords, lab = pipeline.pca_scatter_data(table, labels)
            report.scatter2d(out / "pca_scatter.svg", coords, lab, title=f"{labels} labels")
    except OSError as exc:
        _fail(f"cannot write outputs: {exc}")
    for key, value in metrics.items():
        click.echo(f"{key}={value}")


@main.command("compare")
@click.option("-c", "--config", "config_path", required=True, type=click.Path(exists=False))
@click.option("--seeds", type=int, default=1, show_default=True, help="Number of matched seeds.")
@click.option("--seed", type=int, default=None, help="First seed (falls back to VIDIDI_SEED).")
@click.option("--override", multiple=True, help="KEY=VALUE config override; repeatable.")
@click.option("-o", "--out", "out_dir", default="runs/compare", show_default=True, type=click.Path())
def cmd_compare(config_path, seeds, seed, override, out_dir):
    """Train base and vididi schedules with matched seeds and compare retrieval."""
    cfg = _load_config(config_path, override, None, None)
    if seeds < 1:
        raise click.UsageError("--seeds must be at least 1")
    first = _resolve_seed(seed, default=cfg.seed)
    try:
        ds = load_dataset(cfg.dataset)
    except (OSError, ValueError) as exc:
        _fail(f"cannot load dataset {cfg.dataset}: {exc}")
    schedules = ("base", "vididi")
    try:
        rows = pipeline.run_compare(cfg, ds, [first + i for i in range(seeds)], schedules)
    except DivergenceError as exc:
        _fail(str(exc))
    summary = pipeline.summarize_compare(rows, schedules)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "compare.csv", "w") as fh:
            fh.write("seed,schedule,dynamic_recall1,static_recall1\n")
            for r in rows:
                fh.write(f"{r.seed},{r.schedule},{r.dynamic_recall1!r},{r.static_recall1!r}\n")
        flat = {"objective": cfg.objective, "seeds": seeds}
        for sched in schedules:
            for key, value in summary[sched].items():
                flat[f"{sched}.{key}"] = value
        report.write_report(out / "compare_report.txt", flat)
        report.compare_bars(
            out / "compare_bars.svg",
            list(schedules),
            {
                "dynamic": [summary[s]["dynamic_recall1_mean"] for s in schedules],
                "static": [summary[s]["static_recall1_mean"] for s in schedules],
            },
            {
                "dynamic": [summary[s]["dynamic_recall1_sd"] for s in schedules],
                "static": [summary[s]["static_recall1_sd"] for s in schedules],
            },
            title=f"{cfg.objective}: base vs vididi",
        )
    except OSError as exc:
        _fail(f"cannot write outputs: {exc}")
    for sched in schedules:
        s = summary[sched]
        click.echo(
            f"{sched}: dynamic recall@1 {s['dynamic_recall1_mean']:.3f}±{s['dynamic_recall1_sd']:.3f}, "
            f"static recall@1 {s['static_recall1_mean']:.3f}±{s['static_recall1_sd']:.3f}"
        )


if __name__ == "__main__":
    main()
