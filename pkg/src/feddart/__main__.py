import sys

from feddart.cli import main

sys.exit(main())
