import sys

from blmac_sim.cli import main

sys.exit(main())
