import sys

from delaybsde.cli import main

sys.exit(main())
