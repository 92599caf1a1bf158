import sys

from deltaiss.cli import main

sys.exit(main())
