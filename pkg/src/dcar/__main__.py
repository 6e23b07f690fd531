import sys

from dcar.cli import main

sys.exit(main())
