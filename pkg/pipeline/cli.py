"""
Single entry point for the pipeline: ``python -m pipeline <subcommand> [flags]``.

Each subcommand is a management command of this app, so the same runs are
also available as ``python manage.py <subcommand>``.
"""
import os
import sys
from typing import List, Optional

import django

from .conf import SUBCOMMANDS

PROG = 'edgebench'


def usage() -> str:
    from django.core.management import load_command_class

    lines = [f"usage: {PROG} <subcommand> [options]", "", "subcommands:"]
    for name in SUBCOMMANDS:
        lines.append(f"  {name:<10} {load_command_class('pipeline', name).help}")
    lines.append("")
    lines.append(f"Run '{PROG} <subcommand> --help' for the flags of a subcommand.")
    return "\n".join(lines) + "\n"


def cli_main(argv: Optional[List[str]] = None) -> int:
    """Dispatch to a subcommand and return its exit code (2 for usage errors)."""
    argv = list(sys.argv[1:] if argv is None else argv)
    os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'edgebench_project.settings')
    django.setup()

    if argv and argv[0] in ('-h', '--help'):
        sys.stdout.write(usage())
        return 0
    if not argv or argv[0] not in SUBCOMMANDS:
        if argv:
            sys.stderr.write(f"{PROG}: unknown subcommand {argv[0]!r}\n")
        sys.stderr.write(usage())
        return 2

    from django.core.management import load_command_class

    command = load_command_class('pipeline', argv[0])
    try:
        command.run_from_argv([PROG, *argv])
    except SystemExit as exc:
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    return 0
