"""Command-line entry point."""
import logging
import sys

import click

from mfdelay import __version__
from mfdelay.config import get_config
from mfdelay.errors import EXIT_OK, MFDelayError
from mfdelay.forms.experiment import parse_config
from mfdelay.services.runner import run

logger = logging.getLogger(__name__)


@click.command(context_settings={'help_option_names': ['-h', '--help']})
@click.argument('config_path', metavar='CONFIG', type=click.Path(dir_okay=False))
@click.option('--seed', type=int, default=None, help='Override the simulation seed.')
@click.option('--threads', type=int, default=None, help='Worker threads for noise generation.')
@click.option('--out', 'out', type=click.Path(file_okay=False), default=None, help='Output directory.')
@click.option('--check', 'checks', multiple=True,
              type=click.Choice([name for name, _ in get_config().CHECKS]),
              help='Check to run (repeatable); replaces the list in the config.')
@click.option('--particles', type=int, default=None, help='Override the number of particles.')
@click.option('--dt', type=float, default=None, help='Override the time step.')
@click.version_option(__version__, prog_name='mfdelay')
def main(config_path, seed, threads, out, checks, particles, dt):
    """Run the experiment described by CONFIG (a TOML file)."""
    overrides = {
        'seed': seed,
        'threads': threads,
        'out': out,
        'checks': list(checks),
        'particles': particles,
        'dt': dt,
    }
    try:
        config = parse_config(config_path, overrides)
    except MFDelayError as e:
        for message in getattr(e, 'errors', [str(e)]):
            click.echo(f"❌ {message}", err=True)
        sys.exit(e.exit_code)

    for warning in config.warnings:
        click.echo(f"⚠️ {warning}", err=True)

    outcome = run(config)
    for check in outcome.report.checks:
        mark = '✅' if check['passed'] else '❌'
        click.echo(f"{mark} {check['name']}: {check['measured']:.6g} (threshold {check['threshold']:.6g})")
    if outcome.manifest.failed_at:
        click.echo(f"❌ stopped in '{outcome.manifest.failed_at}': {outcome.manifest.error}", err=True)
    click.echo(f"📁 {len(outcome.artifacts)} files written to {config.output_dir}")
    if outcome.exit_code != EXIT_OK:
        sys.exit(outcome.exit_code)


if __name__ == '__main__':
    main()
