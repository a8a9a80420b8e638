import sys

from mmsi_harness.cli import main

sys.exit(main())
