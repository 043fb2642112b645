import sys

from spotsim.cli import main

sys.exit(main())
