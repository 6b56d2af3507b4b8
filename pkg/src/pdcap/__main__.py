import sys

from pdcap.cli import main

sys.exit(main())
