"""Command-line entry point.

Verbosity is read from ``LHUC_VERBOSITY`` (``quiet``, ``info`` or
``debug``; default ``info``).
"""

from __future__ import annotations

import logging
import os
import sys

import click
import numpy as np

from . import io
from .config import ConfigError, load_config
from .experiments import materialize, run_experiment
from .gradcheck import gradcheck as run_gradcheck
from .model import count_parameters

VERBOSITY_ENV = "LHUC_VERBOSITY"
_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get(VERBOSITY_ENV, "info").strip().lower()
    if name not in _LEVELS:
        raise click.UsageError(f"{VERBOSITY_ENV} must be one of {sorted(_LEVELS)}, got {name!r}")
    logging.basicConfig(level=_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@click.group()
def main():
    """Hidden-unit amplitude adaptation laboratory."""
    _setup_logging()


@main.command()
@click.argument("config", type=click.Path(exists=True, dir_okay=False))
@click.option("--output-dir", "-o", type=click.Path(file_okay=False), default=None,
              help="Override the output directory named in the config.")
def run(config, output_dir):
    """Run the experiment described by CONFIG (YAML or JSON)."""
    try:
        cfg = load_config(config)
    except ConfigError as exc:
        raise click.ClickException(f"invalid config: {exc}") from None
    ctx = run_experiment(cfg, output_dir)
    click.echo(f"{cfg.experiment}: wrote {len(ctx.records)} metric records to {ctx.dir}")


@main.command()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed of the first case.")
@click.option("--cases", type=int, default=25, show_default=True)
def gradcheck(seed, cases):
    """Compare analytic gradients with central finite differences."""
    rep = run_gradcheck(cases, seed=seed)
    for line in rep.lines():
        click.echo(line)
    if not rep.passed:
        sys.exit(1)


@main.command("synth-gen")
@click.argument("spec", type=click.Path(exists=True, dir_okay=False))
@click.argument("out", type=click.Path(file_okay=False))
def synth_gen(spec, out):
    """Generate the datasets described by SPEC into directory OUT."""
    try:
        paths = materialize(spec, out)
    except ConfigError as exc:
        raise click.ClickException(f"invalid spec: {exc}") from None
    for p in paths:
        ds = io.load_dataset(p)
        click.echo(f"{p}: {len(ds)} frames, dim {ds.dim}, {len(ds.speaker_ids())} speakers")


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, dir_okay=False))
def inspect(checkpoint):
    """Summarise a checkpoint file."""
    try:
        ck = io.load_checkpoint(checkpoint)
    except io.CheckpointError as exc:
        raise click.ClickException(f"{checkpoint}: {exc}") from None
    p = ck.params
    si, per = count_parameters(p, ck.bank)
    click.echo(f"format version   {io.CHECKPOINT_VERSION}")
    click.echo(f"topology         {' -> '.join(map(str, p.layer_sizes))} ({p.output_kind})")
    click.echo(f"SI parameters    {si}")
    click.echo(f"reparam kind     {ck.kind or '-'}")
    for key in sorted(ck.metadata):
        click.echo(f"meta.{key:<11} {ck.metadata[key]}")
    if ck.bank is None:
        click.echo("bank             none")
        return
    ids = ck.bank.cluster_ids
    shown = ", ".join(map(str, ids[:10])) + (" ..." if len(ids) > 10 else "")
    click.echo(f"bank             {len(ids)} clusters, {per} amplitudes each: {shown}")
    for cid in ids[:10]:
        stats = " ".join(f"L{l}[{s.min():.3f},{np.mean(s):.3f},{s.max():.3f}]"
                         for l, s in enumerate(ck.bank[cid].scales()))
        click.echo(f"  cluster {cid:<6} scale min,mean,max {stats}")


if __name__ == "__main__":
    main()
