import sys

from racmc.cli import main

sys.exit(main())
