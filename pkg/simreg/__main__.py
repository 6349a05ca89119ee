import sys

from simreg.cli import main

sys.exit(main())
