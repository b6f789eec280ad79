"""Command-line entry point.

Commands: gen-data, train, evolve, eval, plot. One JSON config file
drives a run; flags override the file. Exit codes: 0 ok, 2 config error,
3 IO error, 4 missing input. HCEP_THREADS caps torch parallelism (the
default, 1, keeps runs byte-reproducible).
"""

from __future__ import annotations

import os
import sys
from contextlib import contextmanager
from pathlib import Path

import click

from .checkpoint import load_model, save_model
from .config import RunConfig
from .errors import ConfigError, CorruptSampleError, HcepError, IoError
from .evolve import configure_determinism, fit, run_evolution, write_training_csv
from .hierarchy import ConceptHierarchy, desk_taxonomy, load_hierarchy
from .metrics import evaluate
from .scenes import DatasetManifest, generate_dataset

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4


class MissingInputError(HcepError):
    """A required input artifact does not exist."""


@contextmanager
def output_lock(directory: Path):
    """One writer per output directory; a stale lock must be removed by hand."""
    directory.mkdir(parents=True, exist_ok=True)
    lock = directory / ".hcep.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise IoError(f"{directory} is locked by another run ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _run(command, *args, **kwargs):
    try:
        command(*args, **kwargs)
    except (ConfigError, ValueError) as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except MissingInputError as e:
        click.echo(f"missing input: {e}", err=True)
        sys.exit(EXIT_MISSING)
    except (IoError, CorruptSampleError, OSError) as e:
        click.echo(f"io error: {e}", err=True)
        sys.exit(EXIT_IO)


def _hierarchy_for(cfg: RunConfig) -> ConceptHierarchy:
    if cfg.hierarchy_spec:
        path = Path(cfg.hierarchy_spec)
        if not path.exists():
            raise MissingInputError(f"hierarchy spec {path} does not exist")
        return load_hierarchy(path)
    return desk_taxonomy()


def _build_model(cfg: RunConfig, hierarchy: ConceptHierarchy):
    import torch

    from .decoder import HierSegModel

    configure_determinism()
    # parameter init is part of the training run, so it follows the train
    # seed; the global seed governs data generation
    torch.manual_seed(cfg.train.seed)
    return HierSegModel(cfg.net, hierarchy)


def _load_trained(cfg: RunConfig, hierarchy: ConceptHierarchy, checkpoint: str):
    path = Path(checkpoint)
    if not path.exists():
        raise MissingInputError(f"checkpoint {path} does not exist")
    model = _build_model(cfg, hierarchy)
    load_model(path, model)
    return model


def _manifest_for(cfg: RunConfig) -> DatasetManifest:
    root = Path(cfg.dataset_root)
    if not (root / "manifest.json").exists():
        raise MissingInputError(f"no manifest under {root}; run gen-data first")
    return DatasetManifest.load(root)


def _write_provenance(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")


@click.group()
def main():
    """Hierarchical concept segmentation: data, training, evolution, eval."""


def _common_options(f):
    f = click.option("--config", "config_path", required=True, type=click.Path(), help="run config JSON")(f)
    f = click.option("--seed", type=int, default=None, help="override the global seed")(f)
    f = click.option("--out", "out_dir", type=click.Path(), default=None, help="output directory")(f)
    return f


@main.command("gen-data")
@_common_options
def gen_data(config_path, seed, out_dir):
    """Generate the synthetic dataset and pool manifest."""

    def body():
        cfg = RunConfig.load(config_path, seed_override=seed)
        root = Path(cfg.dataset_root)
        hierarchy = _hierarchy_for(cfg)
        with output_lock(root):
            hierarchy.save(root / "hierarchy.json")
            generate_dataset(
                cfg.scene, hierarchy, cfg.num_samples, root,
                fractions=cfg.fractions,
                hierarchy_spec_path=str(root / "hierarchy.json"),
            )
            _write_provenance(cfg, root)
        click.echo(f"wrote {cfg.num_samples} samples to {root}")

    _run(body)


@main.command("train")
@_common_options
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None,
              help="optional checkpoint to resume from")
def train(config_path, seed, out_dir, checkpoint_path):
    """Train on the labeled pool; writes checkpoints and a loss CSV."""

    def body():
        cfg = RunConfig.load(config_path, seed_override=seed)
        out = Path(out_dir or cfg.output_dir)
        hierarchy = _hierarchy_for(cfg)
        manifest = _manifest_for(cfg)
        with output_lock(out):
            _write_provenance(cfg, out)
            if checkpoint_path:
                model = _load_trained(cfg, hierarchy, checkpoint_path)
            else:
                model = _build_model(cfg, hierarchy)
            log = fit(
                model, manifest, cfg.train, cfg.loss, hierarchy,
                checkpoint_dir=out / "checkpoints",
            )
            write_training_csv(log, out / "training_log.csv")
            save_model(out / "checkpoint.ckpt", model, hierarchy)
        click.echo(f"trained {cfg.train.epochs} epochs; checkpoint at {out / 'checkpoint.ckpt'}")

    _run(body)


@main.command("evolve")
@_common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(),
              help="initial trained checkpoint")
def evolve(config_path, seed, out_dir, checkpoint_path):
    """Run the confidence-driven evolving-labeling iterations."""

    def body():
        cfg = RunConfig.load(config_path, seed_override=seed)
        out = Path(out_dir or cfg.output_dir)
        hierarchy = _hierarchy_for(cfg)
        manifest = _manifest_for(cfg)
        with output_lock(out):
            _write_provenance(cfg, out)
            model = _load_trained(cfg, hierarchy, checkpoint_path)
            manifest, reports = run_evolution(
                model, manifest, cfg.evolve, cfg.train, cfg.loss, hierarchy, out_dir=out,
            )
            save_model(out / "evolved.ckpt", model, hierarchy)
        click.echo(
            f"{cfg.evolve.iterations} iterations done; labeled pool now "
            f"{len(manifest.labeled_ids)} samples"
        )

    _run(body)


@main.command("eval")
@_common_options
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path())
def eval_cmd(config_path, seed, out_dir, checkpoint_path):
    """Evaluate a checkpoint on the test pool."""

    def body():
        cfg = RunConfig.load(config_path, seed_override=seed)
        out = Path(out_dir or cfg.output_dir)
        hierarchy = _hierarchy_for(cfg)
        manifest = _manifest_for(cfg)
        with output_lock(out):
            _write_provenance(cfg, out)
            model = _load_trained(cfg, hierarchy, checkpoint_path)
            report = evaluate(model, manifest, hierarchy)
            report.save(out / "eval_report.json", out / "eval_report.csv", hierarchy)
        click.echo(
            "per-level dice: "
            + ", ".join(f"L{l}={v:.4f}" for l, v in sorted(report.per_level_dice.items()))
        )

    _run(body)


@main.command("plot")
@click.option("--out", "run_dir", required=True, type=click.Path(), help="run directory to plot from")
def plot(run_dir):
    """Emit CSV/SVG figures from a run directory's reports."""

    def body():
        from . import plots

        run = Path(run_dir)
        made = plots.make_all(run)
        if not made:
            raise MissingInputError(f"no reports found under {run}")
        for path in made:
            click.echo(f"wrote {path}")

    _run(body)


if __name__ == "__main__":
    main()
