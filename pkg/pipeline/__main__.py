import sys

from pipeline.cli import cli_main

sys.exit(cli_main())
