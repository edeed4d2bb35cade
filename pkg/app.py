import logging
import sys

import click

from config import LOG_FORMAT, LOG_LEVEL
from errors import GelidError

# Configure logging
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


@click.group()
@click.option('--log-level', default=LOG_LEVEL, show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level):
    """Mine gameplay videos for reported issues: segment, classify, group and cluster"""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, force=True)


# Import commands after the group exists to avoid circular imports
import commands  # noqa: E402,F401


def main(argv=None) -> int:
    """Run the CLI and translate failures into exit codes"""
    try:
        cli.main(args=argv, prog_name='gelid', standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.Abort:
        click.echo('Aborted', err=True)
        return EXIT_USAGE
    except click.ClickException as e:
        e.show()
        return EXIT_USAGE
    except GelidError as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"error: {e}", err=True)
        return e.exit_code
    except (ValueError, OSError) as e:
        logger.error(f"Data error: {e}")
        click.echo(f"error: {e}", err=True)
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL
    return EXIT_OK


def run():
    sys.exit(main())
