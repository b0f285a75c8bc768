import sys

from dtskit.cli import main

sys.exit(main())
