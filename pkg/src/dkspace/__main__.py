import sys

from dkspace.cli import main

sys.exit(main())
