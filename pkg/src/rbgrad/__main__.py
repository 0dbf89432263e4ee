import sys

from rbgrad.cli import main

sys.exit(main())
