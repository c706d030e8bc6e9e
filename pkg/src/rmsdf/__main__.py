import sys

from rmsdf.cli import main

sys.exit(main())
