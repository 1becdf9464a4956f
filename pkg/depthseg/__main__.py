import sys

from depthseg.main import run

sys.exit(run())
