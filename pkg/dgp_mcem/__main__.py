import sys

from dgp_mcem.cli import main

sys.exit(main())
