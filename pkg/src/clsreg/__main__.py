import sys

from clsreg.cli import main

sys.exit(main())
