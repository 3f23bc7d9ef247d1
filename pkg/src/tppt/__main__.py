import sys

from tppt.cli import main

sys.exit(main())
