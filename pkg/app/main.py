"""
Rail Rescheduling Engine - Main Entry Point
"""
import logging
import sys

from app.cli.commands import cli_dispatch
from app.config import get_settings

settings = get_settings()


def configure_logging(level: str = None) -> None:
    """Configure the root logger once for the whole process."""
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def main(argv=None) -> int:
    configure_logging()
    return cli_dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
