"""
Command-line interface for ProbAdapt.

Usage:
    probadapt generate --out data
    probadapt train source --out runs/source
    probadapt train fm_j_m --out runs/fm_j_m
    probadapt train mt_s_m --pretrained runs/source/checkpoints/best.pt --out runs/mt_s_m
    probadapt eval runs/mt_s_m/checkpoints/final.pt --domain target --split test
    probadapt predict runs/mt_s_m/checkpoints/final.pt image.pgm --out pred/
"""

import logging
import os
import sys
from pathlib import Path

try:
    import click
except ImportError:
    print("Click not installed. Run: pip install click")
    print("Or use the Python API directly: from probadapt import Trainer")
    sys.exit(1)

import numpy as np
import torch

from . import __version__
from .checkpoint import load_checkpoint
from .config import METHODS, SUPERVISED_METHODS, Strategy, get_method, load_config, read_config_file
from .consensus import consensus_response
from .data import DatasetConfig, DomainData, export_dataset, image_to_u8, load_domain, load_pgm_pair, write_pgm
from .errors import ConfigError, ProbAdaptError
from .instanceseg import instances_from_prediction
from .records import MetricsLog, OutputLock, RunManifest, ScalarWriter, manifest_inputs, plot_metrics
from .selftrain import Trainer, evaluate, predict_mean

logger = logging.getLogger("probadapt")

_HANDLER_TAG = "_probadapt_cli"


def setup_logging(verbose: bool = False, log_file: Path = None) -> None:
    """stderr handler (and optional log file) on the package logger."""
    for handler in list(logger.handlers):
        if getattr(handler, _HANDLER_TAG, False):
            logger.removeHandler(handler)
            handler.close()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    formatter = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s", "%H:%M:%S")
    handlers = [logging.StreamHandler(sys.stderr)]
    if log_file is not None:
        handlers.append(logging.FileHandler(log_file, encoding="utf-8"))
    for handler in handlers:
        setattr(handler, _HANDLER_TAG, True)
        handler.setFormatter(formatter)
        logger.addHandler(handler)


def apply_thread_cap() -> None:
    value = os.environ.get("PROBADAPT_THREADS")
    if not value:
        return
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"PROBADAPT_THREADS must be an integer, got {value!r}") from None
    if threads < 1:
        raise ConfigError(f"PROBADAPT_THREADS must be >= 1, got {threads}")
    torch.set_num_threads(threads)


class ProbAdaptGroup(click.Group):
    """Maps errors to exit codes: 1 usage/config/data, 2 runtime failures."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except ProbAdaptError as e:
            logger.debug("command failed", exc_info=True)
            click.echo(f"Error: {e}", err=True)
            ctx.exit(e.exit_code)

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            rv = super().main(args, prog_name, complete_var, standalone_mode=False, **extra)
        except click.ClickException as e:
            e.show()
            code = 1
        except click.Abort:
            click.echo("Aborted!", err=True)
            code = 1
        else:
            code = rv if isinstance(rv, int) else 0
        if standalone_mode:
            sys.exit(code)
        return code


@click.group(cls=ProbAdaptGroup)
@click.version_option(version=__version__)
@click.option('-v', '--verbose', is_flag=True, help='Debug logging')
@click.pass_context
def cli(ctx, verbose):
    """ProbAdapt - probabilistic domain adaptation for segmentation.

    WORKFLOW:

    1. Generate a synthetic two-domain dataset:

       probadapt generate --out data

    2. Train on the labeled source domain:

       probadapt train source --out runs/source

    3. Adapt to the target domain, jointly or separately:

       probadapt train fm_j_m --out runs/fm_j_m

       probadapt train mt_s_m --pretrained runs/source/checkpoints/best.pt --out runs/mt_s_m

    4. Evaluate:

       probadapt eval runs/mt_s_m/checkpoints/final.pt --domain target --split test
    """
    ctx.ensure_object(dict)
    ctx.obj["verbose"] = verbose
    setup_logging(verbose)
    apply_thread_cap()


# =============================================================================
# generate
# =============================================================================

@cli.command('generate')
@click.option('-c', '--config', 'config_path', type=click.Path(), help='Dataset config (YAML)')
@click.option('-o', '--out', type=click.Path(), default='data', help='Dataset root (default: data)')
@click.option('-n', '--count', type=int, help='Images per domain (default: 640)')
@click.option('--seed', type=int, help='Base seed; domain i uses seed + i')
def generate_cmd(config_path, out, count, seed):
    """
    Generate a synthetic dataset of PGM images, labels and instance maps.

    Each domain is split 80/10/10 into train/val/test. By default the
    target train split is written without labels.

    Examples:

        probadapt generate --out data

        probadapt generate --out data -n 64 --seed 3
    """
    cfg = DatasetConfig.load(config_path)
    if count is not None:
        cfg.n = count
    if seed is not None:
        for i, spec in enumerate(cfg.domains.values()):
            spec.seed = seed + i
    cfg.validate()

    root = Path(out)
    try:
        manifest = export_dataset(root, cfg)
    except OSError as e:
        raise ConfigError(f"cannot write dataset to {root}: {e}") from None

    click.echo(f"Dataset:  {root}")
    for name in cfg.domains:
        unlabeled = cfg.unlabeled.get(name, [])
        note = f" (unlabeled: {', '.join(unlabeled)})" if unlabeled else ""
        click.echo(f"  {name}: {cfg.n} images{note}")
    click.echo(f"Manifest: {manifest}")


# =============================================================================
# train
# =============================================================================

def _domain_defaults(strategy: Strategy) -> dict:
    defaults = {}
    if strategy is not Strategy.SEPARATE:
        defaults["data.source_domain"] = "source"
    if strategy is not Strategy.SOURCE:
        defaults["data.target_domain"] = "target"
    return defaults


@cli.command('train')
@click.argument('method', required=False)
@click.option('-c', '--config', 'config_path', type=click.Path(), help='Config file or run manifest (YAML)')
@click.option('-o', '--out', type=click.Path(), required=True, help='Run directory')
@click.option('--data', 'data_root', type=click.Path(), help='Dataset root (default: data)')
@click.option('--seed', type=int, help='Run seed')
@click.option('--pretrained', type=click.Path(), help='Source checkpoint (separate methods)')
@click.option('--iterations', type=int, help='Override the preset iteration count')
@click.option('--preset', type=click.Choice(['desk', 'full']), help='Hyperparameter preset')
@click.option('--plots', is_flag=True, help='Write loss and dice curves (needs matplotlib)')
@click.option('--tensorboard', is_flag=True, help='Write TensorBoard scalars (needs tensorboardX)')
@click.pass_context
def train_cmd(ctx, method, config_path, out, data_root, seed, pretrained, iterations, preset, plots, tensorboard):
    """
    Train with METHOD: source (PUNet on labeled source data), unet (the
    deterministic UNet baseline) or one of the 12 self-training methods.

    Method names are <variant>_<strategy>[_<filter>]: variant mt (MeanTeacher)
    or fm (FixMatch); strategy j (joint) or s (separate); filter m (consensus
    masking), w (consensus weighting) or none.

    Examples:

        probadapt train source --out runs/source

        probadapt train unet --out runs/unet

        probadapt train fm_j_m --out runs/fm_j_m

        probadapt train mt_s_w --pretrained runs/source/checkpoints/best.pt --out runs/mt_s_w

        probadapt train --config runs/fm_j_m/manifest.yaml --out runs/fm_j_m_again
    """
    raw = read_config_file(config_path) if config_path else {}
    inputs = manifest_inputs(config_path) if config_path else {}

    method = method or (raw.get("train") or {}).get("method")
    if method is None:
        raise click.UsageError(f"Missing METHOD. Available: {', '.join([*SUPERVISED_METHODS, *METHODS])}")
    spec = get_method(method)

    pretrained = pretrained or inputs.get("pretrained")
    if spec.strategy is Strategy.SEPARATE and not pretrained:
        raise click.UsageError(f"{spec.name} adapts a source model: pass --pretrained CHECKPOINT")

    overrides = {
        "train.method": spec.name,
        "seed": seed,
        "train.iterations": iterations,
        "preset": preset,
        "data.root": data_root,
    }
    defaults = dict(_domain_defaults(spec.strategy))
    defaults["data.root"] = "data"
    cfg = load_config(config_path, overrides=overrides, defaults=defaults)

    out_dir = Path(out)
    verbose = ctx.obj.get("verbose", False)
    with OutputLock(out_dir):
        setup_logging(verbose, out_dir / "train.log")
        writer = ScalarWriter(out_dir / "tensorboard" if tensorboard else None)
        manifest = RunManifest.for_run(cfg, inputs={"pretrained": str(pretrained) if pretrained else None})
        manifest_path = out_dir / "manifest.yaml"
        manifest.save(manifest_path)
        try:
            result = _run_training(cfg, pretrained, out_dir, writer)
            manifest.outputs = {
                "metrics": str(out_dir / "metrics.csv"),
                "best": str(out_dir / "checkpoints" / "best.pt"),
                "final": str(out_dir / "checkpoints" / "final.pt"),
                "log": str(out_dir / "train.log"),
            }
            if plots:
                for path in plot_metrics(out_dir / "metrics.csv"):
                    manifest.outputs[path.stem + "_plot"] = str(path)
        except BaseException:
            manifest.finish("failed")
            manifest.save(manifest_path)
            raise
        finally:
            writer.close()
            setup_logging(verbose)
        manifest.finish()
        manifest.save(manifest_path)

    click.echo(f"Method:     {spec.name} ({spec.label})")
    click.echo(f"Iterations: {result.iterations}")
    if result.best_metric is not None:
        click.echo(f"Best:       {result.best_metric:.4f} at iteration {result.best_iteration}")
    click.echo(f"Run:        {out_dir}")


def _run_training(cfg, pretrained, out_dir: Path, writer: ScalarWriter):
    spec = cfg.method_spec
    model = None
    if pretrained:
        model, metadata = load_checkpoint(pretrained, expected=cfg.model, probabilistic=cfg.probabilistic)
        model.train()
        logger.info("Pretrained model from %s (iteration %s)", pretrained, metadata.get("iteration"))

    root = cfg.data.root
    source = DomainData.load(root, cfg.data.source_domain, require_labels=True) \
        if spec.strategy is not Strategy.SEPARATE else None
    target = DomainData.load(root, cfg.data.target_domain) \
        if spec.strategy is not Strategy.SOURCE else None

    trainer = Trainer(cfg, source=source, target=target, model=model, out_dir=out_dir,
                      writer=writer, progress=sys.stderr.isatty())
    return trainer.run()


# =============================================================================
# eval
# =============================================================================

@cli.command('eval')
@click.argument('checkpoint', type=click.Path(exists=True))
@click.option('-c', '--config', 'config_path', type=click.Path(), help='Config whose model section the checkpoint must match')
@click.option('--data', 'data_root', type=click.Path(), default='data', help='Dataset root (default: data)')
@click.option('-d', '--domain', default='target', help='Domain to evaluate (default: target)')
@click.option('-s', '--split', type=click.Choice(['train', 'val', 'test']), default='test', help='Split (default: test)')
@click.option('--samples', type=int, default=8, help='Prior samples per image (default: 8)')
@click.option('--seed', type=int, default=0, help='Sampling seed (default: 0)')
@click.option('-o', '--out', type=click.Path(), help='Directory for eval.csv')
@click.option('--instances', is_flag=True, help='Also count instances (2-class models)')
def eval_cmd(checkpoint, config_path, data_root, domain, split, samples, seed, out, instances):
    """
    Mean dice of the thresholded mean prediction on a labeled split.

    Examples:

        probadapt eval runs/source/checkpoints/best.pt --domain source --split val

        probadapt eval runs/fm_j_m/checkpoints/final.pt --samples 1
    """
    if samples < 1:
        raise click.BadParameter("must be >= 1", param_hint="--samples")
    expected = load_config(config_path).model if config_path else None
    model, _ = load_checkpoint(checkpoint, expected=expected)
    if instances and model.config.num_classes != 2:
        raise ConfigError("--instances needs a 2-class (foreground, boundary) model")

    data = load_domain(data_root, domain, split, require_labels=True)
    generator = torch.Generator().manual_seed(seed)
    report = evaluate(model, data, n_samples=samples, generator=generator)
    rows = report.to_rows()
    for row, sample in zip(rows, data):
        row["index"] = sample.index

    if instances:
        count_generator = torch.Generator().manual_seed(seed)
        for row, sample in zip(rows, data):
            image = torch.from_numpy(sample.image)[None, None]
            mean = predict_mean(model, image, samples, count_generator)[0]
            row["instances"] = instances_from_prediction(mean).instance_count

    columns = ["index", "dice"] + (["instances"] if instances else [])
    click.echo("  ".join(f"{c:>9}" for c in columns))
    for row in rows:
        cells = [f"{row['index']:>9}", f"{row['dice']:>9.2f}"]
        if instances:
            cells.append(f"{row['instances']:>9}")
        click.echo("  ".join(cells))
    click.echo(f"\nMean dice ({domain}/{split}, {len(rows)} images, {samples} samples): {report.mean:.2f}")

    if out:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "eval.csv"
        report_log = MetricsLog(path, columns=columns)
        for row in rows:
            report_log.append(row)
        click.echo(f"Report:    {path}")


# =============================================================================
# predict
# =============================================================================

def _write_probabilities(out_dir: Path, stem: str, probabilities: torch.Tensor) -> list:
    """(K, H, W) probabilities as 8-bit PGM, one file per class when K > 1."""
    paths = []
    arrays = probabilities.detach().cpu().numpy()
    for k, array in enumerate(arrays):
        path = out_dir / (f"{stem}.pgm" if len(arrays) == 1 else f"{stem}_c{k}.pgm")
        write_pgm(path, image_to_u8(array))
        paths.append(path)
    return paths


@cli.command('predict')
@click.argument('checkpoint', type=click.Path(exists=True))
@click.argument('image', type=click.Path(exists=True))
@click.option('-o', '--out', type=click.Path(), required=True, help='Output directory')
@click.option('--samples', type=int, default=8, help='Prior samples (default: 8)')
@click.option('--seed', type=int, default=0, help='Sampling seed (default: 0)')
@click.option('--theta', type=float, default=0.5, help='Consensus threshold (default: 0.5)')
@click.option('--instances', is_flag=True, help='Write a 16-bit instance labeling (2-class models)')
def predict_cmd(checkpoint, image, out, samples, seed, theta, instances):
    """
    Sample predictions for one PGM image.

    Writes mean.pgm, sample_NN.pgm and consensus.pgm (8-bit), plus
    instances.pgm (16-bit) with --instances.

    Examples:

        probadapt predict runs/fm_j_m/checkpoints/final.pt data/target/test/images/0600.pgm -o pred
    """
    if samples < 1:
        raise click.BadParameter("must be >= 1", param_hint="--samples")
    model, _ = load_checkpoint(checkpoint)
    if instances and model.config.num_classes != 2:
        raise ConfigError("--instances needs a 2-class (foreground, boundary) model")

    sample = load_pgm_pair(image)
    x = torch.from_numpy(sample.image)[None, None]
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        predictions = [p[0] for p in model.predict_samples(x, samples, generator)]
    mean = torch.stack(predictions).mean(dim=0)
    consensus = consensus_response(predictions, theta)

    out_dir = Path(out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = _write_probabilities(out_dir, "mean", mean)
        for i, p in enumerate(predictions):
            written += _write_probabilities(out_dir, f"sample_{i:02d}", p)
        consensus_path = out_dir / "consensus.pgm"
        write_pgm(consensus_path, image_to_u8(consensus.values.numpy()))
        written.append(consensus_path)
        if instances:
            labeling = instances_from_prediction(mean)
            labeling.save(out_dir / "instances.pgm")
            written.append(out_dir / "instances.pgm")
    except OSError as e:
        raise ProbAdaptError(f"cannot write predictions to {out_dir}: {e}") from None

    click.echo(f"Image:     {image}")
    click.echo(f"Samples:   {samples}")
    click.echo(f"Mean foreground: {float((mean[0] >= 0.5).float().mean()):.2%}")
    click.echo(f"Consensus: {consensus.mean:.2f} mean")
    click.echo(f"Written:   {len(written)} files in {out_dir}")


# =============================================================================
# check
# =============================================================================

@cli.command()
def check():
    """
    Check installed dependencies and show what's missing.

    Example:

        probadapt check
    """
    import platform

    click.echo("\nProbAdapt Dependency Check")
    click.echo("=" * 32)
    click.echo(f"\nPython: {platform.python_version()}")

    click.echo("\nRequired:")
    click.echo(f"  [x] torch: {torch.__version__}")
    click.echo(f"  [x] numpy: {np.__version__}")
    import scipy
    click.echo(f"  [x] scipy: {scipy.__version__}")
    import PIL
    click.echo(f"  [x] pillow: {PIL.__version__}")

    click.echo("\nOptional:")
    try:
        import tensorboardX
        click.echo(f"  [x] tensorboardX: {tensorboardX.__version__} (--tensorboard)")
    except ImportError:
        click.echo("  [ ] tensorboardX: Not installed")
        click.echo("      -> Fix: pip install probadapt[tensorboard]")
    try:
        import matplotlib
        click.echo(f"  [x] matplotlib: {matplotlib.__version__} (--plots)")
    except ImportError:
        click.echo("  [ ] matplotlib: Not installed")
        click.echo("      -> Fix: pip install probadapt[plots]")

    click.echo("\n" + "-" * 35)
    threads = os.environ.get("PROBADAPT_THREADS")
    click.echo(f"Threads: {torch.get_num_threads()}" + (f" (PROBADAPT_THREADS={threads})" if threads else ""))
    click.echo("")


def main():
    """Entry point."""
    cli()


if __name__ == '__main__':
    main()
