import logging
import sys
from typing import Optional, Sequence

import click

from depthseg.cli.commands import COMMANDS

logger = logging.getLogger("depthseg")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@click.group()
@click.option(
    "--log-level",
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    show_default=True,
)
def cli(log_level: str):
    """Depth estimation and depth-guided optic disc/cup segmentation of fundus images."""
    logging.basicConfig(level=log_level.upper(), format=LOG_FORMAT, force=True)


# Include subcommands
for command in COMMANDS:
    cli.add_command(command)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code: 0 success, 1 runtime failure, 2 usage error."""
    try:
        cli.main(args=list(argv) if argv is not None else None, prog_name="depthseg", standalone_mode=False)
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except click.exceptions.Abort:
        click.echo("Aborted!", err=True)
        return 1
    except click.exceptions.Exit as e:
        return e.exit_code
    except Exception as e:
        logger.error(f"Unhandled error: {e}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(run())
